"""HomoODE and its baselines (Neural ODE, Augmented Neural ODE, DEQ).

All four share a feature extractor g(x; w), a dynamics / equilibrium core,
and a linear head on the (spatially pooled) final state:

* ``homoode``: dz/dt = F(z; g(x)), integrated from a fixed initial point
  (zero, or a shared learnable one); the condition is concatenated to the
  state channels at every evaluation and there is no time input.
* ``node``: dz/dt = F(z, t), started at z(t0) = g(x).
* ``anode``: as ``node`` on [g(x); 0] with ``augment_dim`` extra channels.
* ``deq``: z* = f(z*; g(x)) found by Anderson iteration from zero, with an
  implicit-function backward.

Two backbones are provided: ``conv`` for (n, c, h, w) images and ``mlp``
for (n, d) point data.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .equilibrium import (
    EquilibriumProblem,
    NonConvergenceError,
    Solve,
    fixed_point_iterate,
    solve_adjoint,
)
from .ode import OdeSolution, SolverConfig, ode_solve
from .tensor import (
    Tape,
    Tensor,
    no_grad,
    concat,
    conv2d,
    group_norm,
    log_softmax,
    record_op,
    variational_dropout_mask,
)

KINDS = ("homoode", "node", "anode", "deq")
KIND_ALIASES = {"homo_ode": "homoode", "neural_ode": "node"}
ARCHS = ("conv", "mlp")


class DataError(ValueError):
    pass


class ForwardError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    kind: str = "homoode"
    arch: str = "conv"
    in_channels: int = 1
    image_size: int = 28
    input_dim: int = 2
    channels: int = 32
    groups: int = 4
    num_classes: int = 10
    augment_dim: int = 0
    dropout: float = 0.0
    t0: float = 0.0
    t1: float = 1.0
    downsample: int = 2
    activation: str = "relu"
    deq_anderson_depth: int = 5
    deq_tol: float = 1e-4
    deq_max_iter: int = 50
    deq_strict: bool = True  # False: carry on from the last iterate when unconverged
    seed: int = 0

    def __post_init__(self):
        self.kind = KIND_ALIASES.get(self.kind, self.kind)
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.augment_dim < 0:
            raise ValueError("augment_dim must be >= 0")
        if self.arch == "conv" and self.channels % self.groups:
            raise ValueError("groups must divide channels")


@dataclass
class ForwardRecord:
    z_final: Tensor
    nfe: int
    condition: Tensor
    z0: Tensor
    trajectory: Optional[OdeSolution] = None
    mask: Optional[Tensor] = None
    iterations: int = 0


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=int)
    k = logits.shape[-1]
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise DataError("labels must be a 1-D array matching the batch size")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    return -(logp[np.arange(labels.size), labels]).mean()


class ImplicitModel:
    def __init__(self, config: ModelConfig, solver: Optional[SolverConfig] = None):
        self.config = config
        self.solver = solver or SolverConfig()
        self.params: Dict[str, Tensor] = {}
        self._build(np.random.default_rng(config.seed))

    # ---- construction --------------------------------------------------
    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    @property
    def state_channels(self) -> int:
        c = self.config
        return c.channels + (c.augment_dim if c.kind == "anode" else 0)

    @property
    def feature_hw(self) -> tuple:
        c = self.config
        if c.arch == "mlp":
            return (1, 1)
        s = c.image_size
        for _ in range(2):
            s = s // c.downsample if c.downsample > 1 else s
        return (s, s)

    @property
    def z_shape(self) -> tuple:
        if self.config.arch == "mlp":
            return (self.state_channels,)
        return (self.state_channels,) + self.feature_hw

    def _dyn_in(self) -> int:
        c = self.config
        sc = self.state_channels
        if c.kind in ("homoode", "deq"):
            return sc + c.channels
        return sc + 1

    def _build(self, rng) -> None:
        c = self.config
        C = c.channels
        sc = self.state_channels
        din = self._dyn_in()
        if c.arch == "conv":
            k, pad = (4, 1) if c.downsample == 2 else (3, 1)
            self._ext_geom = (c.downsample, pad)
            self._add("ext.conv1.w", _uniform(rng, (C, c.in_channels, k, k), c.in_channels * k * k))
            self._add("ext.conv1.b", np.zeros(C))
            self._add("ext.gn1.w", np.ones(C))
            self._add("ext.gn1.b", np.zeros(C))
            self._add("ext.conv2.w", _uniform(rng, (C, C, k, k), C * k * k))
            self._add("ext.conv2.b", np.zeros(C))
            self._add("ext.gn2.w", np.ones(C))
            self._add("ext.gn2.b", np.zeros(C))
            self._add("dyn.conv1.w", _uniform(rng, (C, din, 3, 3), din * 9))
            self._add("dyn.conv1.b", np.zeros(C))
            self._add("dyn.gn1.w", np.ones(C))
            self._add("dyn.gn1.b", np.zeros(C))
            self._add("dyn.conv2.w", _uniform(rng, (C, C, 3, 3), C * 9))
            self._add("dyn.conv2.b", np.zeros(C))
            self._add("dyn.gn2.w", np.ones(C))
            self._add("dyn.gn2.b", np.zeros(C))
            self._add("dyn.conv3.w", _uniform(rng, (sc, C, 3, 3), C * 9))
            self._add("dyn.conv3.b", np.zeros(sc))
        else:
            self._add("ext.lin1.w", _uniform(rng, (c.input_dim, C), c.input_dim))
            self._add("ext.lin1.b", np.zeros(C))
            self._add("ext.lin2.w", _uniform(rng, (C, C), C))
            self._add("ext.lin2.b", np.zeros(C))
            self._add("dyn.lin1.w", _uniform(rng, (din, C), din))
            self._add("dyn.lin1.b", np.zeros(C))
            self._add("dyn.lin2.w", _uniform(rng, (C, C), C))
            self._add("dyn.lin2.b", np.zeros(C))
            self._add("dyn.lin3.w", _uniform(rng, (C, sc), C))
            self._add("dyn.lin3.b", np.zeros(sc))
        self._add("head.w", _uniform(rng, (sc, c.num_classes), sc))
        self._add("head.b", np.zeros(c.num_classes))

    def parameters(self, prefix: str = "") -> List[Tensor]:
        return [t for n, t in self.params.items() if n.startswith(prefix)]

    def named_parameters(self, prefix: str = ""):
        return [(n, t) for n, t in self.params.items() if n.startswith(prefix)]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_final_dynamics(self) -> None:
        """Zero the last dynamics layer so the vector field vanishes identically."""
        last = "dyn.conv3" if self.config.arch == "conv" else "dyn.lin3"
        self.params[f"{last}.w"].data[...] = 0.0
        self.params[f"{last}.b"].data[...] = 0.0

    # ---- components ----------------------------------------------------
    def extract(self, x) -> Tensor:
        """Feature extractor g(x; w)."""
        P = self.params
        x = x if isinstance(x, Tensor) else Tensor(x)
        c = self.config
        if c.arch == "conv":
            stride, pad = self._ext_geom
            h = conv2d(x, P["ext.conv1.w"], P["ext.conv1.b"], stride=stride, padding=pad)
            h = group_norm(h, c.groups, P["ext.gn1.w"], P["ext.gn1.b"]).relu()
            h = conv2d(h, P["ext.conv2.w"], P["ext.conv2.b"], stride=stride, padding=pad)
            return group_norm(h, c.groups, P["ext.gn2.w"], P["ext.gn2.b"])
        h = (x @ P["ext.lin1.w"] + P["ext.lin1.b"]).tanh()
        return h @ P["ext.lin2.w"] + P["ext.lin2.b"]

    def _time_channel(self, z: Tensor, t: float) -> Tensor:
        shape = (z.shape[0], 1) + z.shape[2:]
        return Tensor(np.full(shape, t, dtype=z.data.dtype))

    def _core(self, u: Tensor, mask: Optional[Tensor]) -> Tensor:
        P = self.params
        c = self.config
        if c.arch == "conv":
            h = conv2d(u, P["dyn.conv1.w"], P["dyn.conv1.b"], padding=1)
            h = group_norm(h, c.groups, P["dyn.gn1.w"], P["dyn.gn1.b"])
            h = h.relu() if c.activation == "relu" else h.tanh()
            if mask is not None:
                h = h * mask
            h = conv2d(h, P["dyn.conv2.w"], P["dyn.conv2.b"], padding=1)
            h = group_norm(h, c.groups, P["dyn.gn2.w"], P["dyn.gn2.b"])
            h = h.relu() if c.activation == "relu" else h.tanh()
            return conv2d(h, P["dyn.conv3.w"], P["dyn.conv3.b"], padding=1).tanh()
        h = (u @ P["dyn.lin1.w"] + P["dyn.lin1.b"]).tanh()
        if mask is not None:
            h = h * mask
        h = (h @ P["dyn.lin2.w"] + P["dyn.lin2.b"]).tanh()
        return (h @ P["dyn.lin3.w"] + P["dyn.lin3.b"]).tanh()

    def dynamics(self, z, t: float, condition: Optional[Tensor] = None,
                 mask: Optional[Tensor] = None) -> Tensor:
        """Vector field of the ODE kinds; for ``homoode`` ``t`` is ignored."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        if self.config.kind in ("homoode", "deq"):
            return self._core(concat([z, condition], axis=1), mask)
        return self._core(concat([z, self._time_channel(z, t)], axis=1), mask)

    def equilibrium_map(self, z, condition: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        """DEQ core f(z; x)."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        return self._core(concat([z, condition], axis=1), mask)

    def classify(self, z_final: Tensor) -> Tensor:
        P = self.params
        pooled = z_final.mean(axis=(2, 3)) if z_final.ndim == 4 else z_final
        return pooled @ P["head.w"] + P["head.b"]

    def loss(self, logits: Tensor, labels) -> Tensor:
        return cross_entropy(logits, labels)

    def zero_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch,) + self.z_shape))

    def sample_mask(self, batch: int, rng: Optional[np.random.Generator]) -> Optional[Tensor]:
        rate = self.config.dropout
        if rate <= 0 or rng is None:
            return None
        spatial = 2 if self.config.arch == "conv" else 0
        return variational_dropout_mask(self.config.channels, rate, rng, batch=batch,
                                        spatial_dims=spatial)

    # ---- forward passes -----------------------------------------------
    def forward(self, x, z0: Optional[Tensor] = None, record: bool = False,
                rng: Optional[np.random.Generator] = None,
                solver: Optional[SolverConfig] = None) -> ForwardRecord:
        """Run the model's implicit layer; ``rng`` enables dropout (training)."""
        kind = self.config.kind
        if kind == "homoode":
            return homoode_forward(self, x, z0, record, rng, solver)
        if kind == "node":
            return neural_ode_forward(self, x, record, rng, solver)
        if kind == "anode":
            return anode_forward(self, x, record, rng, solver)
        return deq_forward(self, x, rng)

    def predict(self, x, z0: Optional[Tensor] = None):
        rec = self.forward(x, z0)
        return self.classify(rec.z_final), rec


def _integrate(m: ImplicitModel, f, z0: Tensor, record: bool, solver: Optional[SolverConfig]):
    c = m.config
    try:
        return ode_solve(f, z0, c.t0, c.t1, solver or m.solver, keep_trajectory=record)
    except Exception as exc:
        raise ForwardError(f"{c.kind} forward failed: {exc}") from exc


def homoode_forward(m: ImplicitModel, x, z0: Optional[Tensor] = None, record: bool = False,
                    rng=None, solver: Optional[SolverConfig] = None) -> ForwardRecord:
    cond = m.extract(x)
    n = cond.shape[0]
    if z0 is None:
        z0 = m.zero_state(n)
    elif z0.shape[0] != n:
        z0 = Tensor(np.broadcast_to(z0.data, (n,) + z0.shape[1:]).copy())
    if z0.shape[1:] != m.z_shape:
        raise ValueError(f"initial point shape {z0.shape[1:]} != {m.z_shape}")
    mask = m.sample_mask(n, rng)
    sol = _integrate(m, lambda z, t: m.dynamics(z, t, cond, mask), z0, record, solver)
    return ForwardRecord(sol.final, sol.nfe, cond, z0, sol if record else None, mask)


def neural_ode_forward(m: ImplicitModel, x, record: bool = False, rng=None,
                       solver: Optional[SolverConfig] = None) -> ForwardRecord:
    feats = m.extract(x)
    z0 = feats
    if m.config.kind == "anode" and m.config.augment_dim > 0:
        pad = Tensor(np.zeros((feats.shape[0], m.config.augment_dim) + feats.shape[2:]))
        z0 = concat([feats, pad], axis=1)
    mask = m.sample_mask(feats.shape[0], rng)
    sol = _integrate(m, lambda z, t: m.dynamics(z, t, None, mask), z0, record, solver)
    return ForwardRecord(sol.final, sol.nfe, feats, z0, sol if record else None, mask)


def anode_forward(m: ImplicitModel, x, record: bool = False, rng=None,
                  solver: Optional[SolverConfig] = None) -> ForwardRecord:
    return neural_ode_forward(m, x, record, rng, solver)


def deq_forward(m: ImplicitModel, x, rng=None) -> ForwardRecord:
    c = m.config
    cond = m.extract(x)
    n = cond.shape[0]
    mask = m.sample_mask(n, rng)
    cond_c = cond.detach()
    mask_c = mask

    def fmap(z, _):
        return m.equilibrium_map(Tensor(z), cond_c, mask_c).data

    with no_grad():
        p = EquilibriumProblem(fmap, max_iter=c.deq_max_iter, tol=c.deq_tol)
        z0 = np.zeros((n,) + m.z_shape)
        try:
            sol = fixed_point_iterate(p, z0, c.deq_anderson_depth)
        except NonConvergenceError as exc:
            if c.deq_strict or exc.last is None or not np.all(np.isfinite(exc.last)):
                raise ForwardError(f"deq forward failed: {exc}") from exc
            sol = Solve(exc.last, exc.iterations, float("nan"))
    z_star = sol.z_star
    z_out = m.equilibrium_map(Tensor(z_star), cond, mask)

    def back(g):
        with Tape() as inner:
            zt = Tensor(z_star, requires_grad=True)
            out = m.equilibrium_map(zt, cond_c, mask_c)
        vjp = lambda v: inner.gradient(out, [zt], seed=v)[0]  # noqa: E731
        try:
            a = solve_adjoint(vjp, g, tol=1e-6, max_iter=200)
        except NonConvergenceError as exc:
            if c.deq_strict or exc.last is None:
                raise ForwardError(f"deq backward failed: {exc}") from exc
            a = exc.last
        return (a,)

    z_final = record_op(z_out.data, (z_out,), back)
    return ForwardRecord(z_final, sol.iterations, cond, Tensor(z0), None, mask, sol.iterations)


# ---- checkpoint container ------------------------------------------------
# Layout (little-endian): b"HODECKPT", version u32, tensor count u32, then
# per tensor: name length u32, UTF-8 name, ndim u32, dims u64 * ndim,
# float64 data in C order.  "__meta__" holds the JSON config as one float64
# per byte; "__shared_init__" holds the shared initial point when present.

CHECKPOINT_MAGIC = b"HODECKPT"
CHECKPOINT_VERSION = 1
META_NAME = "__meta__"
SHARED_INIT_NAME = "__shared_init__"


class CheckpointError(IOError):
    pass


def write_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(float)
    return out


def save_checkpoint(path, model: ImplicitModel, shared_init: Optional[np.ndarray] = None,
                    extra: Optional[dict] = None) -> None:
    meta = {"model": asdict(model.config), "solver": asdict(model.solver), "extra": extra or {}}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tensors = {META_NAME: blob.astype(float)}
    tensors.update({n: t.data for n, t in model.params.items()})
    if shared_init is not None:
        tensors[SHARED_INIT_NAME] = np.asarray(shared_init)
    write_tensors(path, tensors)


def load_checkpoint(path):
    """Returns (model, shared_init array or None, extra dict)."""
    tensors = read_tensors(path)
    if META_NAME not in tensors:
        raise CheckpointError(f"{path}: missing {META_NAME}")
    meta = json.loads(tensors.pop(META_NAME).astype(np.uint8).tobytes().decode("utf-8"))
    model = ImplicitModel(ModelConfig(**meta["model"]), SolverConfig(**meta["solver"]))
    shared = tensors.pop(SHARED_INIT_NAME, None)
    if set(tensors) != set(model.params):
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    for name, arr in tensors.items():
        if arr.shape != model.params[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        model.params[name].data = arr.copy()
    return model, shared, meta.get("extra", {})
