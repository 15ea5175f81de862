"""Feature schema, synthetic multi-scenario data, CSV I/O and mini-batching."""

from __future__ import annotations

import csv
import hashlib
import io
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SHARED = "shared"
SPECIFIC = "specific"
OOV = 0


class SchemaError(ValueError):
    pass


class DataParseError(ValueError):
    pass


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class FieldDef:
    name: str
    category: str
    vocab_size: int
    embed_dim: int


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple[FieldDef, ...]
    scenario_count: int

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in {names}")
        for f in self.fields:
            if f.category not in (SHARED, SPECIFIC):
                raise SchemaError(f"field {f.name!r}: category must be shared|specific, got {f.category!r}")
            if f.vocab_size < 1 or f.embed_dim < 1:
                raise SchemaError(f"field {f.name!r}: vocab_size and embed_dim must be >= 1")
            if f.name in ("label", "scenario"):
                raise SchemaError(f"field name {f.name!r} is reserved")
        if not any(f.category == SHARED for f in self.fields):
            raise SchemaError("schema needs at least one shared field")
        if self.scenario_count < 1:
            raise SchemaError("scenario count must be >= 1")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def indices(self, category: str) -> list[int]:
        return [i for i, f in enumerate(self.fields) if f.category == category]

    def to_text(self) -> str:
        lines = [f"{f.name} {f.category} {f.vocab_size} {f.embed_dim}" for f in self.fields]
        lines.append(f"scenarios={self.scenario_count}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "FeatureSchema":
        fields, m = [], None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("scenarios"):
                key, _, val = line.partition("=")
                if key.strip() != "scenarios" or not val.strip().isdigit():
                    raise SchemaError(f"line {lineno}: bad scenarios entry {raw!r}")
                m = int(val)
                continue
            parts = line.split()
            if len(parts) != 4:
                raise SchemaError(f"line {lineno}: expected 'name category vocab_size embed_dim'")
            name, cat, vocab, dim = parts
            try:
                fields.append(FieldDef(name, cat, int(vocab), int(dim)))
            except ValueError:
                raise SchemaError(f"line {lineno}: vocab_size/embed_dim must be integers") from None
        if m is None:
            raise SchemaError("schema text lacks 'scenarios=M'")
        return cls(tuple(fields), m)


def default_schema(scenario_count: int = 3, embed_dim: int = 8) -> FeatureSchema:
    spec = [
        ("user_group", SHARED, 100), ("item", SHARED, 100),
        ("item_category", SHARED, 20), ("context", SHARED, 10),
        ("position", SPECIFIC, 10), ("item_stat", SPECIFIC, 30),
    ]
    return FeatureSchema(tuple(FieldDef(n, c, v, embed_dim) for n, c, v in spec), scenario_count)


@dataclass(frozen=True)
class Instance:
    feature_indices: tuple[int, ...]
    label: int
    scenario: int  # 1-based


@dataclass
class Dataset:
    """Column store of instances. ``scenario`` is 1-based."""

    features: np.ndarray  # (N, F) int64
    labels: np.ndarray  # (N,) int64
    scenario: np.ndarray  # (N,) int64

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.int64)
        if feats.ndim != 2:
            feats = feats.reshape(len(self.labels), -1)
        self.features = feats
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scenario = np.asarray(self.scenario, dtype=np.int64)
        for a in (self.features, self.labels, self.scenario):
            a.flags.writeable = False

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Instance:
        return Instance(tuple(int(v) for v in self.features[i]), int(self.labels[i]),
                        int(self.scenario[i]))

    def __iter__(self) -> Iterator[Instance]:
        return (self[i] for i in range(len(self)))

    def subset(self, rows: np.ndarray) -> "Dataset":
        return Dataset(self.features[rows], self.labels[rows], self.scenario[rows])

    @classmethod
    def from_instances(cls, instances: Sequence[Instance], n_fields: int) -> "Dataset":
        if not instances:
            return cls(np.zeros((0, n_fields)), np.zeros(0), np.zeros(0))
        return cls(np.array([i.feature_indices for i in instances]),
                   np.array([i.label for i in instances]),
                   np.array([i.scenario for i in instances]))

    def validate(self, schema: FeatureSchema) -> None:
        if self.features.shape[1] != len(schema.fields):
            raise SchemaError(
                f"dataset has {self.features.shape[1]} fields, schema {len(schema.fields)}")
        vocab = np.array([f.vocab_size for f in schema.fields])
        if len(self) and ((self.features < 0) | (self.features >= vocab)).any():
            raise SchemaError("feature index outside its vocabulary")
        if len(self) and (self.scenario.min() < 1 or self.scenario.max() > schema.scenario_count):
            raise SchemaError(f"scenario outside [1, {schema.scenario_count}]")
        if len(self) and not np.isin(self.labels, (0, 1)).all():
            raise SchemaError("labels must be 0/1")


Batch = Dataset


@dataclass(frozen=True)
class Splits:
    train: Dataset
    valid: Dataset
    test: Dataset

    def __getitem__(self, name: str) -> Dataset:
        return getattr(self, name)


# ---------------------------------------------------------------------- generator


@dataclass(frozen=True)
class GeneratorConfig:
    scenarios: int = 3
    samples: int = 50_000
    scenario_proportions: tuple[float, ...] = (0.05, 0.35, 0.60)
    shared_signal_strength: float = 1.0
    specific_signal_strength: float = 1.5
    base_click_rate: float = 0.2
    teacher_dim: int = 8
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scenario_proportions", tuple(float(p) for p in self.scenario_proportions))
        object.__setattr__(self, "split", tuple(float(p) for p in self.split))
        p = self.scenario_proportions
        if len(p) != self.scenarios:
            raise ValueError(f"{len(p)} proportions for {self.scenarios} scenarios")
        if any(x <= 0 for x in p) or abs(sum(p) - 1.0) > 1e-9:
            raise ValueError(f"scenario proportions must be positive and sum to 1, got {p}")
        if not 0.0 < self.base_click_rate < 1.0:
            raise ValueError("base_click_rate must lie in (0, 1)")
        if self.shared_signal_strength < 0 or self.specific_signal_strength < 0:
            raise ValueError("signal strengths must be >= 0")
        if len(self.split) != 3 or any(x < 0 for x in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError(f"split fractions must be three non-negatives summing to 1, got {self.split}")
        if self.samples < 1 or self.teacher_dim < 1:
            raise ValueError("samples and teacher_dim must be >= 1")


@dataclass
class Teacher:
    """Hidden generator weights, kept for oracle checks."""

    bias: float
    shared_strength: float
    specific_strength: float
    shared_tables: list[np.ndarray]  # per shared field: (V, k)
    specific_tables: list[np.ndarray]  # per specific field: (M, V, k)
    u_shared: np.ndarray  # (k,)
    u_scenario: np.ndarray  # (M, 3k)
    shared_cols: list[int] = field(default_factory=list)
    specific_cols: list[int] = field(default_factory=list)

    def logits(self, data: Dataset, scenario: np.ndarray | None = None) -> np.ndarray:
        """Teacher logit; ``scenario`` (1-based) overrides each row's own."""
        s = (data.scenario if scenario is None else np.asarray(scenario)) - 1
        phi = sum(t[data.features[:, c]] for t, c in zip(self.shared_tables, self.shared_cols))
        phi = phi / np.sqrt(len(self.shared_cols))
        if self.specific_cols:
            psi = sum(t[s, data.features[:, c]] for t, c in zip(self.specific_tables, self.specific_cols))
            psi = psi / np.sqrt(len(self.specific_cols))
        else:
            psi = np.zeros_like(phi)
        joint = np.concatenate([phi, psi, phi * psi], axis=1)
        return (self.bias + self.shared_strength * phi @ self.u_shared
                + self.specific_strength * (joint * self.u_scenario[s]).sum(axis=1) / np.sqrt(3.0))

    def save(self, path: str | Path) -> None:
        arrays = {"bias": self.bias, "shared_strength": self.shared_strength,
                  "specific_strength": self.specific_strength, "u_shared": self.u_shared,
                  "u_scenario": self.u_scenario, "shared_cols": np.array(self.shared_cols),
                  "specific_cols": np.array(self.specific_cols)}
        arrays.update({f"shared_{i}": t for i, t in enumerate(self.shared_tables)})
        arrays.update({f"specific_{i}": t for i, t in enumerate(self.specific_tables)})
        # np.savez stamps entries with the current time; fixed stamps keep the file byte-stable
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name, value in arrays.items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asarray(value), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)),
                            buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "Teacher":
        z = np.load(path)
        sc, pc = [int(c) for c in z["shared_cols"]], [int(c) for c in z["specific_cols"]]
        return cls(float(z["bias"]), float(z["shared_strength"]), float(z["specific_strength"]),
                   [z[f"shared_{i}"] for i in range(len(sc))],
                   [z[f"specific_{i}"] for i in range(len(pc))],
                   z["u_shared"], z["u_scenario"], sc, pc)


@dataclass
class GeneratedData:
    splits: Splits
    teacher: Teacher
    full: Dataset


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def generate(config: GeneratorConfig, schema: FeatureSchema) -> GeneratedData:
    """Draw a seed-deterministic multi-scenario dataset from a logistic teacher.

    Click logit = b0 + shared * <u_shared, phi(x_c)> + specific * <u_m, [phi, psi_m, phi*psi_m]>,
    where phi sums fixed random embeddings of the shared fields and psi_m those of
    the specific fields looked up in scenario m's own teacher tables.
    """
    M = config.scenarios
    if schema.scenario_count != M:
        raise GenerationError(f"schema has {schema.scenario_count} scenarios, generator {M}")
    if config.samples < M:
        raise GenerationError(f"{config.samples} samples cannot cover {M} scenarios")
    rng = np.random.default_rng(config.seed)
    k = config.teacher_dim
    shared_cols, specific_cols = schema.indices(SHARED), schema.indices(SPECIFIC)

    teacher = Teacher(
        bias=float(np.log(config.base_click_rate / (1.0 - config.base_click_rate))),
        shared_strength=config.shared_signal_strength,
        specific_strength=config.specific_signal_strength,
        shared_tables=[rng.standard_normal((schema.fields[c].vocab_size, k)) for c in shared_cols],
        specific_tables=[rng.standard_normal((M, schema.fields[c].vocab_size, k)) for c in specific_cols],
        u_shared=rng.standard_normal(k) / np.sqrt(k),
        u_scenario=rng.standard_normal((M, 3 * k)) / np.sqrt(k),
        shared_cols=shared_cols, specific_cols=specific_cols,
    )

    n = config.samples
    scenario = rng.choice(M, size=n, p=np.array(config.scenario_proportions)) + 1
    if len(np.unique(scenario)) < M:
        raise GenerationError(f"{n} samples left some scenario empty; raise the sample count")
    cols = []
    for f in schema.fields:
        if f.vocab_size > 1:
            cols.append(rng.integers(1, f.vocab_size, size=n))  # 0 stays the OOV bucket
        else:
            cols.append(np.zeros(n, dtype=np.int64))
    features = np.stack(cols, axis=1)
    full = Dataset(features, np.zeros(n), scenario)
    p = _sigmoid(teacher.logits(full))
    labels = (rng.random(n) < p).astype(np.int64)
    full = Dataset(features, labels, scenario)

    order = rng.permutation(n)
    n_train = int(round(config.split[0] * n))
    n_valid = int(round(config.split[1] * n))
    splits = Splits(full.subset(order[:n_train]),
                    full.subset(order[n_train:n_train + n_valid]),
                    full.subset(order[n_train + n_valid:]))
    return GeneratedData(splits, teacher, full)


# ---------------------------------------------------------------------- CSV


def write_csv(path: str | Path, data: Dataset, schema: FeatureSchema) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.names + ["label", "scenario"])
        for row, y, s in zip(data.features.tolist(), data.labels.tolist(), data.scenario.tolist()):
            w.writerow(row + [y, s])


def load_csv(path: str | Path, schema: FeatureSchema) -> Dataset:
    """Parse a dataset CSV. Out-of-vocabulary indices map to bucket 0."""
    expected = schema.names + ["label", "scenario"]
    vocab = [f.vocab_size for f in schema.fields]
    F, M = len(vocab), schema.scenario_count
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, expected header {expected}")
        header = [h.strip() for h in header]
        for col in expected:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        pos = [header.index(c) for c in expected]
        feats, labels, scen = [], [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                vals = [int(row[p]) for p in pos]
            except (ValueError, IndexError):
                raise DataParseError(f"{path}:{lineno}: non-integer or missing value in {row}") from None
            x, y, s = vals[:F], vals[F], vals[F + 1]
            if y not in (0, 1):
                raise DataParseError(f"{path}:{lineno}: label must be 0 or 1, got {y}")
            if not 1 <= s <= M:
                raise DataParseError(f"{path}:{lineno}: scenario {s} outside [1, {M}]")
            feats.append([v if 0 <= v < vocab[j] else OOV for j, v in enumerate(x)])
            labels.append(y)
            scen.append(s)
    return Dataset(np.array(feats, dtype=np.int64).reshape(-1, F), np.array(labels), np.array(scen))


def write_splits(directory: str | Path, splits: Splits, schema: FeatureSchema) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "schema.txt").write_text(schema.to_text())
    for name in ("train", "valid", "test"):
        write_csv(directory / f"{name}.csv", splits[name], schema)


def read_splits(directory: str | Path, schema: FeatureSchema | None = None) -> tuple[Splits, FeatureSchema]:
    directory = Path(directory)
    if schema is None:
        schema = FeatureSchema.from_text((directory / "schema.txt").read_text())
    parts = {n: load_csv(directory / f"{n}.csv", schema) for n in ("train", "valid", "test")}
    return Splits(**parts), schema


# ---------------------------------------------------------------------- batching


def batch_iter(data: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[Dataset]:
    """One epoch of mini-batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(data)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        yield data.subset(order[start:start + batch_size])
