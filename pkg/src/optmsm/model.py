"""OptMSM network: dual embeddings, SE adaptation gate, pluggable transfer layer,
contrastive orthogonality loss, hypernetwork-gated scenario towers.

Parameters live in a plain ``dict[str, np.ndarray]``; a forward pass wraps
them as leaf tensors so the same code serves training (inside a tape) and
evaluation (outside one).  Scenario-indexed weights carry the scenario on
their leading axis.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import SHARED, SPECIFIC, Dataset, FeatureSchema
from .tensor import Tensor

VARIANTS = ("fcn", "moe", "cgc")
MODES = ("optmsm", "mix", "shared_bottom")
ORTH_MODES = ("raw", "squared")
ORTH_REDUCTIONS = ("sum", "mean")


class ConfigError(ValueError):
    pass


class RoutingError(ValueError):
    pass


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "optmsm"
    transfer: str = "fcn"
    transfer_dims: tuple[int, ...] = (32, 16)
    tower_dims: tuple[int, ...] = (32, 16, 8)
    hyper_hidden: int = 4
    experts: int = 0  # moe: total experts, cgc: experts per scenario; 0 -> default
    shared_experts: int = 2
    use_priors: bool = True
    use_hypernet: bool = True
    orth_mode: str = "raw"
    orth_reduction: str = "mean"  # over batch rows; "sum" is the plain pairwise total
    scenario_tables: bool = True  # prior fields get one embedding table per scenario

    def __post_init__(self):
        object.__setattr__(self, "transfer_dims", tuple(int(d) for d in self.transfer_dims))
        object.__setattr__(self, "tower_dims", tuple(int(d) for d in self.tower_dims))
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.transfer not in VARIANTS:
            raise ConfigError(f"unknown transfer variant {self.transfer!r}; expected one of {VARIANTS}")
        if self.orth_mode not in ORTH_MODES:
            raise ConfigError(f"unknown orth_mode {self.orth_mode!r}")
        if self.orth_reduction not in ORTH_REDUCTIONS:
            raise ConfigError(f"unknown orth_reduction {self.orth_reduction!r}")
        if not self.transfer_dims or not self.tower_dims:
            raise ConfigError("transfer_dims and tower_dims need at least one layer")
        if min(self.transfer_dims + self.tower_dims) < 1 or self.hyper_hidden < 1:
            raise ConfigError("layer widths must be >= 1")
        if self.experts < 0 or self.shared_experts < 0:
            raise ConfigError("expert counts must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transfer_dims"] = list(self.transfer_dims)
        d["tower_dims"] = list(self.tower_dims)
        return d


def glorot(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


@dataclass
class ForwardOutput:
    prob: Tensor  # (B,) prediction for each row's own scenario
    logit: Tensor  # (B,)
    reps: Tensor | None  # (M, B, d) representations for every scenario
    orth: Tensor  # scalar orthogonality loss
    gates: Tensor | None = None  # (B, sum of tower input widths), layer blocks side by side


class OptMSM:
    """Architecture bound to a schema; stateless apart from its configuration."""

    def __init__(self, schema: FeatureSchema, config: ModelConfig = ModelConfig()):
        self.schema = schema
        self.config = config
        self.M = schema.scenario_count
        cfg = config
        specific = schema.indices(SPECIFIC)
        if cfg.mode == "optmsm" and cfg.use_priors:
            self.gate_fields = schema.indices(SHARED)
            self.prior_fields = specific
        else:
            self.gate_fields = list(range(len(schema.fields)))
            self.prior_fields = []
        self.field_dims = [schema.fields[c].embed_dim for c in self.gate_fields]
        self.gate_width = sum(self.field_dims)
        self._expand, self._squeeze = _field_maps(self.field_dims)
        self.rep_dim = cfg.transfer_dims[-1]
        prior_width = sum(schema.fields[c].embed_dim for c in self.prior_fields)
        self.tower_in = (self.rep_dim + prior_width) if cfg.mode == "optmsm" else self.gate_width
        self.tower_widths = [self.tower_in, *cfg.tower_dims, 1]
        self.tower_groups = 1 if cfg.mode == "mix" else self.M
        self.hyper_on = cfg.mode == "optmsm" and cfg.use_hypernet
        self.n_experts = cfg.experts or (2 * self.M if cfg.transfer == "moe" else 2)
        self.hyper_mask = hyper_block_mask(cfg.hyper_hidden, self.tower_widths[:-1])

    # ------------------------------------------------------------ parameters

    def init_params(self, seed: int, hyper_identity: bool = True) -> dict[str, np.ndarray]:
        """Glorot-uniform weights, zero biases; hypernet output layer zero unless told otherwise."""
        rng = np.random.default_rng(seed)
        cfg, M, schema = self.config, self.M, self.schema
        p: dict[str, np.ndarray] = {}
        for c, f in enumerate(schema.fields):
            per_scenario = c in self.prior_fields and cfg.scenario_tables
            shape = (M, f.vocab_size, f.embed_dim) if per_scenario else (f.vocab_size, f.embed_dim)
            p[f"emb.{f.name}"] = rng.normal(0.0, 0.05, size=shape)
        if cfg.mode == "optmsm":
            n = len(self.gate_fields)
            p["se.W"] = glorot(rng, (M, n, n), n, n)
            p["se.b"] = np.zeros((M, 1, n))
            self._init_transfer(p, rng)
        if self.hyper_on:
            H, L = cfg.hyper_hidden, len(self.tower_widths) - 1
            p["hyper.w0"] = glorot(rng, (M, self.tower_in, L * H), self.tower_in, H)
            p["hyper.b0"] = np.zeros((M, L * H))
            widths = self.tower_widths[:-1]
            if hyper_identity:
                p["hyper.w1"] = np.zeros((M, L * H, sum(widths)))
                p["hyper.b1"] = np.zeros((M, sum(widths)))
            else:
                w1 = np.concatenate([glorot(rng, (M, L * H, w), H, w) for w in widths], axis=2)
                p["hyper.w1"] = w1 * self.hyper_mask
                p["hyper.b1"] = rng.normal(0.0, 0.1, size=(M, sum(widths)))
        G = self.tower_groups
        for l, (a, b) in enumerate(zip(self.tower_widths[:-1], self.tower_widths[1:])):
            p[f"tower.W{l}"] = glorot(rng, (G, a, b), a, b)
            p[f"tower.b{l}"] = np.zeros((G, b))
        return p

    def _init_transfer(self, p: dict, rng: np.random.Generator) -> None:
        cfg, M = self.config, self.M
        widths = [self.gate_width, *cfg.transfer_dims]
        for l, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            if cfg.transfer == "fcn":
                p[f"fcn.shared.W{l}"] = glorot(rng, (a, b), a, b)
                p[f"fcn.shared.b{l}"] = np.zeros(b)
                # scenario factor starts near the multiplicative identity
                p[f"fcn.scen.W{l}"] = 1.0 + glorot(rng, (M, a, b), a, b)
                p[f"fcn.scen.b{l}"] = np.zeros((M, 1, b))
            elif cfg.transfer == "moe":
                K = self.n_experts
                p[f"moe.expert.W{l}"] = glorot(rng, (K, a, b), a, b)
                p[f"moe.expert.b{l}"] = np.zeros((K, b))
            else:
                E, K = self.n_experts, cfg.shared_experts
                p[f"cgc.own.W{l}"] = glorot(rng, (M, E, a, b), a, b)
                p[f"cgc.own.b{l}"] = np.zeros((M, 1, E, b))
                if K:
                    p[f"cgc.shared.W{l}"] = glorot(rng, (K, a, b), a, b)
                    p[f"cgc.shared.b{l}"] = np.zeros((K, b))
        n_in = self.gate_width
        if cfg.transfer == "moe":
            K = self.n_experts
            p["moe.gate.W"] = glorot(rng, (M, n_in, K), n_in, K)
            p["moe.gate.b"] = np.zeros((M, 1, K))
        elif cfg.transfer == "cgc":
            K = self.n_experts + cfg.shared_experts
            p["cgc.gate.W"] = glorot(rng, (M, n_in, K), n_in, K)
            p["cgc.gate.b"] = np.zeros((M, 1, K))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.init_params(0).items()}

    def scenario_params(self) -> list[str]:
        """Names of parameters whose leading axis indexes the scenario."""
        scen = ("se.", "fcn.scen.", "moe.gate.", "cgc.own.", "cgc.gate.", "hyper.")
        out = []
        for name, shape in self.param_shapes().items():
            if name.startswith(scen) or (name.startswith("emb.") and len(shape) == 3):
                out.append(name)
            elif name.startswith("tower.") and self.tower_groups == self.M:
                out.append(name)
        return out

    # ------------------------------------------------------------ forward

    def forward(self, params: Mapping[str, Tensor], batch: Dataset, *,
                dropout: float = 0.0, rng: np.random.Generator | None = None,
                hyper_enabled: bool | None = None, orth_grad: bool = True) -> ForwardOutput:
        """Route each row through its own scenario's gate, hypernet and tower.

        Representations are built for every scenario; only the row's own one
        feeds its tower, the rest enter the orthogonality loss.  With
        ``orth_grad=False`` that loss is still computed but kept off the tape.
        """
        cfg, M = self.config, self.M
        x = batch.features
        s0 = np.asarray(batch.scenario, dtype=np.int64) - 1
        B = len(s0)
        if B and (s0.min() < 0 or s0.max() >= M):
            raise RoutingError(f"scenario outside [1, {M}] in batch")
        hyper = self.hyper_on if hyper_enabled is None else (hyper_enabled and self.hyper_on)

        fields = embed(params, self.schema, x, s0, self.gate_fields)
        priors = embed(params, self.schema, x, s0, self.prior_fields)

        if cfg.mode == "optmsm":
            gated = se_gate(fields, params["se.W"], params["se.b"], self._expand, self._squeeze)
            reps = transfer(gated, cfg.transfer, params, len(cfg.transfer_dims))
            if orth_grad:
                orth = orth_loss(reps, cfg.orth_mode, cfg.orth_reduction)
            else:
                with T.no_grad():
                    orth = orth_loss(reps, cfg.orth_mode, cfg.orth_reduction)
            active = T.gather(reps, s0, np.arange(B))
            r0 = T.concat([active, *priors], axis=1)
        else:
            reps = None
            orth = Tensor(0.0)
            r0 = T.concat(fields, axis=1)

        routes = scenario_routes(s0, self.tower_groups)
        gates = (hyper_gates(r0, params, routes, self.tower_widths[:-1], self.hyper_mask)
                 if hyper else None)
        masks = None
        if dropout > 0.0 and rng is not None:
            masks = [(rng.random((B, w)) >= dropout) / (1.0 - dropout)
                     for w in self.tower_widths[:-1]]
        logit = tower_forward(r0, gates, params, routes, len(self.tower_widths) - 1, masks)
        logit = T.reshape(logit, (B,))
        return ForwardOutput(T.sigmoid(logit), logit, reps, orth, gates)

    def predict(self, params: Mapping[str, np.ndarray], data: Dataset,
                chunk: int = 8192) -> np.ndarray:
        """Click probabilities for every row, evaluated without a tape."""
        leaves = {k: Tensor(v) for k, v in params.items()}
        out = [self.forward(leaves, data.subset(np.arange(i, min(i + chunk, len(data))))).prob.data
               for i in range(0, len(data), chunk)]
        return np.concatenate(out) if out else np.zeros(0)

    def representations(self, params: Mapping[str, np.ndarray], data: Dataset,
                        chunk: int = 8192) -> np.ndarray:
        """(N, M, d) contrastive representations for every row and scenario."""
        if self.config.mode != "optmsm":
            raise ConfigError(f"{self.config.mode} mode has no scenario representations")
        leaves = {k: Tensor(v) for k, v in params.items()}
        parts = []
        for i in range(0, len(data), chunk):
            sub = data.subset(np.arange(i, min(i + chunk, len(data))))
            fields = embed(leaves, self.schema, sub.features, sub.scenario - 1, self.gate_fields)
            gated = se_gate(fields, leaves["se.W"], leaves["se.b"], self._expand, self._squeeze)
            reps = transfer(gated, self.config.transfer, leaves, len(self.config.transfer_dims))
            parts.append(np.swapaxes(reps.data, 0, 1))
        return np.concatenate(parts) if parts else np.zeros((0, self.M, self.rep_dim))


# ---------------------------------------------------------------- building blocks


def embed(params: Mapping[str, Tensor], schema: FeatureSchema, x: np.ndarray,
          s0: np.ndarray, cols: Sequence[int]) -> list[Tensor]:
    """Look up one (B, d) embedding per listed field."""
    out = []
    for c in cols:
        table = params[f"emb.{schema.fields[c].name}"]
        out.append(T.gather(table, s0, x[:, c]) if table.ndim == 3 else T.take_rows(table, x[:, c]))
    return out


def _field_maps(dims: Sequence[int]) -> tuple[Tensor, Tensor]:
    width = sum(dims)
    expand = np.zeros((len(dims), width))
    squeeze = np.zeros((width, len(dims)))
    col = 0
    for i, d in enumerate(dims):
        expand[i, col:col + d] = 1.0
        squeeze[col:col + d, i] = 1.0 / d
        col += d
    return Tensor(expand), Tensor(squeeze)


def se_gate(field_embs: Sequence[Tensor], W: Tensor, b: Tensor,
            expand: Tensor | None = None, squeeze: Tensor | None = None) -> Tensor:
    """Squeeze-and-excitation over fields for every scenario.

    ``field_embs``: i tensors (B, d_f); ``W``: (M, i, i); ``b``: (M, 1, i).
    Returns (M, B, sum d_f): each field scaled by its scenario gate z_i.
    """
    n = len(field_embs)
    if W.ndim != 3 or W.shape[1:] != (n, n) or b.shape != (W.shape[0], 1, n):
        raise T.DimensionError(f"se_gate: {n} fields but W{W.shape} b{b.shape}")
    if expand is None or squeeze is None:
        expand, squeeze = _field_maps([e.shape[1] for e in field_embs])
    flat = T.concat(list(field_embs), axis=1)  # (B, D)
    means = T.matmul(flat, squeeze)  # (B, i)
    z = T.sigmoid(T.add(T.matmul(means, W), b))  # (M, B, i)
    return T.mul(T.matmul(z, expand), flat)  # (M, B, D)


def transfer(x: Tensor, variant: str, params: Mapping[str, Tensor], n_layers: int) -> Tensor:
    """Representations for every scenario from its gated input ``x`` (M, B, D)."""
    if variant == "fcn":
        h = x
        for l in range(n_layers):
            w = T.mul(params[f"fcn.shared.W{l}"], params[f"fcn.scen.W{l}"])  # (M, a, b)
            h = T.matmul(h, w)
            h = T.add(T.add(h, params[f"fcn.shared.b{l}"]), params[f"fcn.scen.b{l}"])
            h = T.relu(h)
        return h
    if variant == "moe":
        h = T.relu(T.add(T.einsum("mbi,kih->mbkh", x, params["moe.expert.W0"]),
                         params["moe.expert.b0"]))
        for l in range(1, n_layers):
            h = T.relu(T.add(T.einsum("mbki,kih->mbkh", h, params[f"moe.expert.W{l}"]),
                             params[f"moe.expert.b{l}"]))
        g = T.softmax(T.add(T.matmul(x, params["moe.gate.W"]), params["moe.gate.b"]))
        return T.einsum("mbk,mbkh->mbh", g, h)
    if variant == "cgc":
        own = T.relu(T.add(T.einsum("mbi,meih->mbeh", x, params["cgc.own.W0"]),
                           params["cgc.own.b0"]))
        for l in range(1, n_layers):
            own = T.relu(T.add(T.einsum("mbei,meih->mbeh", own, params[f"cgc.own.W{l}"]),
                               params[f"cgc.own.b{l}"]))
        experts = own
        if "cgc.shared.W0" in params:
            sh = T.relu(T.add(T.einsum("mbi,kih->mbkh", x, params["cgc.shared.W0"]),
                              params["cgc.shared.b0"]))
            for l in range(1, n_layers):
                sh = T.relu(T.add(T.einsum("mbki,kih->mbkh", sh, params[f"cgc.shared.W{l}"]),
                                  params[f"cgc.shared.b{l}"]))
            experts = T.concat([own, sh], axis=2)
        g = T.softmax(T.add(T.matmul(x, params["cgc.gate.W"]), params["cgc.gate.b"]))
        return T.einsum("mbk,mbkh->mbh", g, experts)
    raise ConfigError(f"unknown transfer variant {variant!r}")


def orth_loss(reps: Tensor, mode: str = "raw", reduction: str = "sum") -> Tensor:
    """Cosine (or cosine**2) summed over unordered scenario pairs, then summed or
    averaged over samples.  ``reps`` is (M, B, d)."""
    M, B = reps.shape[0], reps.shape[1]
    if mode not in ORTH_MODES:
        raise ConfigError(f"unknown orth_mode {mode!r}")
    if reduction not in ORTH_REDUCTIONS:
        raise ConfigError(f"unknown orth_reduction {reduction!r}")
    if M < 2 or B == 0:
        return Tensor(0.0)
    total = T.pairwise_cosine_sum(reps, squared=mode == "squared")
    return T.scale(total, 1.0 / B) if reduction == "mean" else total


def hyper_block_mask(hidden: int, widths: Sequence[int]) -> np.ndarray:
    """0/1 mask keeping layer l's hidden units wired only to layer l's gate outputs."""
    mask = np.zeros((hidden * len(widths), sum(widths)))
    col = 0
    for l, w in enumerate(widths):
        mask[l * hidden:(l + 1) * hidden, col:col + w] = 1.0
        col += w
    return mask


def scenario_routes(s0: np.ndarray, groups: int) -> list:
    """Row selectors per scenario; contiguous slices when ``s0`` is sorted."""
    B = len(s0)
    if groups == 1:
        return [slice(0, B)]
    if B and np.all(s0[1:] >= s0[:-1]):
        edges = np.searchsorted(s0, np.arange(groups + 1))
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]
    return [np.flatnonzero(s0 == m) for m in range(groups)]


def hyper_gates(r0: Tensor, params: Mapping[str, Tensor], routes: Sequence,
                widths: Sequence[int], mask: np.ndarray | None = None) -> Tensor:
    """Gates 2*sigmoid(w1_l relu(w0_l r0 + b0_l) + b1_l) for every tower layer, in (0, 2).

    The per-layer hypernetworks are stored side by side: ``hyper.w0`` holds
    every layer's first weight as a column block, ``hyper.w1`` is block
    diagonal (``mask`` pins the off-diagonal blocks to zero).  The result is
    (B, sum(widths)) with layer l's gate in its own column block.
    """
    w0, w1 = params["hyper.w0"], params["hyper.w1"]
    if w0.shape[1] != r0.shape[1]:
        raise T.DimensionError(f"hypernet input width {r0.shape[1]} vs w0{w0.shape}")
    if w1.shape[2] != sum(widths):
        raise T.DimensionError(f"hypernet output width {w1.shape[2]} vs tower layers {list(widths)}")
    if mask is None:
        mask = hyper_block_mask(w0.shape[2] // len(widths), widths)
    return T.routed_gate_mlp(r0, w0, params["hyper.b0"], w1, params["hyper.b1"], routes,
                             mask, out_scale=2.0)


def tower_forward(r0: Tensor, gates: Tensor | None, params: Mapping[str, Tensor],
                  routes: Sequence, n_layers: int,
                  dropout_masks: Sequence[np.ndarray] | None = None) -> Tensor:
    """Scenario towers; layer l sees its input scaled by gate block l. Returns (B, 1) logits."""
    return T.routed_mlp(r0, [params[f"tower.W{l}"] for l in range(n_layers)],
                        [params[f"tower.b{l}"] for l in range(n_layers)], routes,
                        gate=gates, input_scales=dropout_masks)


# ---------------------------------------------------------------- persistence

MAGIC = b"OPTMSM-MODEL 1\n"


def save_model(path: str | Path, model: OptMSM, params: Mapping[str, np.ndarray],
               extra: dict | None = None) -> None:
    """Manifest line (JSON) followed by row-major little-endian float64 tensors."""
    names = list(params)
    manifest = {
        "schema_hash": model.schema.hash(),
        "schema": model.schema.to_text(),
        "model_config": model.config.to_dict(),
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_model(path: str | Path) -> tuple[OptMSM, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ModelFileError(f"{path}: not a model file")
    end = raw.index(b"\n", len(MAGIC))
    manifest = json.loads(raw[len(MAGIC):end])
    schema = FeatureSchema.from_text(manifest["schema"])
    if schema.hash() != manifest["schema_hash"]:
        raise ModelFileError(f"{path}: schema hash mismatch inside file")
    model = OptMSM(schema, ModelConfig(**manifest["model_config"]))
    expected = model.param_shapes()
    listed = {p["name"]: tuple(p["shape"]) for p in manifest["params"]}
    if listed != expected:
        diff = sorted(set(listed.items()) ^ set(expected.items()))
        raise ModelFileError(f"{path}: parameter shapes do not match config: {diff}")
    params, offset = {}, end + 1
    for p in manifest["params"]:
        shape = tuple(p["shape"])
        count = int(np.prod(shape))
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise ModelFileError(f"{path}: truncated at tensor {p['name']}")
        params[p["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ModelFileError(f"{path}: {len(raw) - offset} trailing bytes")
    return model, params, manifest
