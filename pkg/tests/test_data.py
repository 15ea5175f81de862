from collections import Counter

import numpy as np
import pytest

from optmsm.data import (Dataset, DataParseError, FeatureSchema, FieldDef, GenerationError,
                         GeneratorConfig, Instance, SchemaError, Teacher, batch_iter,
                         default_schema, generate, load_csv, read_splits, write_csv, write_splits)
from optmsm.metrics import auc


@pytest.fixture(scope="module")
def default_data():
    return generate(GeneratorConfig(), default_schema())


def small_schema(M=3):
    return FeatureSchema((FieldDef("u", "shared", 5, 2), FieldDef("p", "specific", 4, 2)), M)


def test_schema_validation():
    with pytest.raises(SchemaError, match="shared"):
        FeatureSchema((FieldDef("p", "specific", 4, 2),), 2)
    with pytest.raises(SchemaError, match="duplicate"):
        FeatureSchema((FieldDef("u", "shared", 4, 2), FieldDef("u", "shared", 4, 2)), 2)
    with pytest.raises(SchemaError):
        FeatureSchema((FieldDef("u", "shared", 0, 2),), 2)
    with pytest.raises(SchemaError):
        FeatureSchema((FieldDef("u", "global", 3, 2),), 2)


def test_schema_text_round_trip_and_hash():
    s = default_schema()
    back = FeatureSchema.from_text(s.to_text())
    assert back == s and back.hash() == s.hash()
    assert default_schema(embed_dim=4).hash() != s.hash()
    with pytest.raises(SchemaError, match="line 1"):
        FeatureSchema.from_text("u shared five 2\nscenarios=2\n")
    with pytest.raises(SchemaError, match="scenarios"):
        FeatureSchema.from_text("u shared 5 2\n")


def test_generator_config_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        GeneratorConfig(scenario_proportions=(0.5, 0.3, 0.3))
    with pytest.raises(ValueError):
        GeneratorConfig(base_click_rate=1.0)
    with pytest.raises(ValueError):
        GeneratorConfig(specific_signal_strength=-1.0)
    with pytest.raises(GenerationError):
        generate(GeneratorConfig(samples=2), default_schema())


def test_scenario_counts_follow_proportions(default_data):
    # multinomial expectation: shares within 2 percentage points of the proportions
    shares = np.bincount(default_data.full.scenario, minlength=4)[1:] / len(default_data.full)
    np.testing.assert_allclose(shares, (0.05, 0.35, 0.60), atol=0.02)


def test_splits_are_80_10_10_and_deterministic(default_data):
    sp = default_data.splits
    assert (len(sp.train), len(sp.valid), len(sp.test)) == (40_000, 5_000, 5_000)
    again = generate(GeneratorConfig(), default_schema()).splits
    for name in ("train", "valid", "test"):
        assert np.array_equal(sp[name].features, again[name].features)
        assert np.array_equal(sp[name].labels, again[name].labels)
    other = generate(GeneratorConfig(seed=1), default_schema()).splits
    assert not np.array_equal(other.train.labels, sp.train.labels)


def test_indices_in_vocab_and_zero_reserved(default_data):
    schema = default_schema()
    default_data.full.validate(schema)
    assert (default_data.full.features >= 1).all()


def test_own_scenario_teacher_beats_cross_scenario(default_data):
    t, data = default_data.teacher, default_data.full
    M = 3
    for m in range(1, M + 1):
        rows = data.subset(np.flatnonzero(data.scenario == m))
        own = auc(t.logits(rows), rows.labels)
        for other in range(1, M + 1):
            if other != m:
                cross = auc(t.logits(rows, np.full(len(rows), other)), rows.labels)
                assert own > cross, (m, other, own, cross)


def test_pure_noise_labels():
    cfg = GeneratorConfig(shared_signal_strength=0.0, specific_signal_strength=0.0, base_click_rate=0.3)
    g = generate(cfg, default_schema())
    assert abs(g.full.labels.mean() - 0.3) < 0.01
    np.testing.assert_allclose(g.teacher.logits(g.full), np.log(0.3 / 0.7))


def test_no_specific_signal_teacher_is_scenario_free():
    g = generate(GeneratorConfig(specific_signal_strength=0.0, samples=2000), default_schema())
    rows = g.full
    base = g.teacher.logits(rows, np.ones(len(rows), dtype=int))
    for m in (2, 3):
        np.testing.assert_array_equal(g.teacher.logits(rows, np.full(len(rows), m)), base)


def test_teacher_file_round_trip(tmp_path, default_data):
    t = default_data.teacher
    t.save(tmp_path / "t.npz")
    back = Teacher.load(tmp_path / "t.npz")
    np.testing.assert_array_equal(back.logits(default_data.full), t.logits(default_data.full))
    t.save(tmp_path / "t2.npz")
    assert (tmp_path / "t.npz").read_bytes() == (tmp_path / "t2.npz").read_bytes()


def test_csv_round_trip(tmp_path):
    schema = default_schema()
    g = generate(GeneratorConfig(samples=3000, seed=3), schema)
    write_splits(tmp_path, g.splits, schema)
    splits, s2 = read_splits(tmp_path)
    assert s2 == schema
    for name in ("train", "valid", "test"):
        assert list(splits[name]) == list(g.splits[name])


def test_csv_header_only_is_empty(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("u,p,label,scenario\n")
    d = load_csv(p, small_schema())
    assert len(d) == 0 and d.features.shape == (0, 2)


def test_csv_errors_name_column_and_line(tmp_path):
    schema = small_schema()
    p = tmp_path / "a.csv"
    p.write_text("u,label,scenario\n1,0,1\n")
    with pytest.raises(SchemaError, match="'p'"):
        load_csv(p, schema)
    p.write_text("u,p,label,scenario\n1,2,0,1\n1,x,0,1\n")
    with pytest.raises(DataParseError, match=":3"):
        load_csv(p, schema)
    p.write_text("u,p,label,scenario\n1,2,0,1\n1,2,0,1\n1,2,0,4\n")
    with pytest.raises(DataParseError, match=":4.*scenario 4"):
        load_csv(p, schema)


def test_csv_out_of_vocab_maps_to_zero(tmp_path):
    p = tmp_path / "o.csv"
    p.write_text("u,p,label,scenario\n7,3,1,2\n-1,9,0,1\n")
    d = load_csv(p, small_schema())
    assert d[0] == Instance((0, 3), 1, 2)
    assert d[1] == Instance((0, 0), 0, 1)


def test_csv_column_order_follows_header(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("scenario,label,p,u\n2,1,3,4\n")
    assert load_csv(p, small_schema())[0] == Instance((4, 3), 1, 2)


def test_batch_iter_sizes_and_determinism():
    d = Dataset(np.arange(10).reshape(10, 1), np.zeros(10), np.ones(10))
    assert [len(b) for b in batch_iter(d, 4)] == [4, 4, 2]
    a = [b.features[:, 0].tolist() for b in batch_iter(d, 3, shuffle_seed=5)]
    b = [b.features[:, 0].tolist() for b in batch_iter(d, 3, shuffle_seed=5)]
    assert a == b
    assert Counter(sum(a, [])) == Counter(range(10))
    with pytest.raises(ValueError):
        next(batch_iter(d, 0))


def test_dataset_instances_round_trip():
    inst = [Instance((1, 2), 1, 1), Instance((3, 0), 0, 2)]
    d = Dataset.from_instances(inst, 2)
    assert list(d) == inst
    assert len(Dataset.from_instances([], 2)) == 0
