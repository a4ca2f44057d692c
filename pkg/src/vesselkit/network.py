"""Attention-gated 3D U-Net with group normalization and deep supervision.

Encoder levels double their channel count and halve resolution; decoder
levels upsample, gate the matching encoder feature with an additive
attention coefficient, concatenate, and convolve back down. Intermediate
decoder outputs are projected to class logits, upsampled to full
resolution, and summed with the final head so one loss supervises every
depth.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    Tensor,
    concat_channels,
    conv3d,
    elementwise_add,
    elementwise_mul,
    group_norm,
    maxpool3d,
    relu,
    sigmoid,
    upsample_trilinear,
)
from .errors import ConfigError, FormatError, IntegrityError, ShapeError

CHECKPOINT_MAGIC = b"CVAU"
CHECKPOINT_VERSION = 1


def default_kernel_plan(levels: int) -> tuple[tuple[int, int], ...]:
    """First block opens with a 7^3 kernel; everything else is 3^3."""
    return ((7, 3),) + ((3, 3),) * (levels - 1)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    kernel_plan gives the two conv kernel sizes per encoder level; None
    selects the default plan. attention GN layers fall back to
    gcd(gn_groups, channels) groups where the halved intermediate width is
    not divisible.
    """

    in_channels: int = 1
    num_classes: int = 2
    levels: int = 5
    base_channels: int = 16
    gn_groups: int = 8
    kernel_plan: tuple[tuple[int, int], ...] | None = None
    deep_supervision: bool = True

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("need in_channels >= 1 and num_classes >= 2")
        if self.base_channels < 1 or self.gn_groups < 1:
            raise ConfigError("base_channels and gn_groups must be positive")
        if self.base_channels % self.gn_groups:
            raise ConfigError(
                f"base_channels {self.base_channels} not divisible by gn_groups {self.gn_groups}"
            )
        plan = self.kernel_plan
        if plan is None:
            plan = default_kernel_plan(self.levels)
        plan = tuple((int(a), int(b)) for a, b in plan)
        if len(plan) != self.levels:
            raise ConfigError(f"kernel_plan has {len(plan)} entries for {self.levels} levels")
        if any(k % 2 == 0 or k < 1 for pair in plan for k in pair):
            raise ConfigError(f"kernel sizes must be odd and positive, got {plan}")
        object.__setattr__(self, "kernel_plan", plan)

    def channels(self, level: int) -> int:
        return self.base_channels * (2**level)


@dataclass
class Model:
    """Named parameter map plus the configuration that shaped it."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameter(self, name: str) -> Tensor:
        return self.params[name]

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            p.data = state[k].copy().astype(p.data.dtype)


def _attention_groups(cfg: ModelConfig, channels: int) -> int:
    return math.gcd(cfg.gn_groups, channels)


def parameter_plan(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Stable name -> shape map for every parameter in the model."""
    plan: dict[str, tuple[int, ...]] = {}

    def conv_block(prefix, cin, cout, k):
        plan[f"{prefix}.w"] = (cout, cin, k, k, k)
        plan[f"{prefix}.b"] = (cout,)

    def gn_block(prefix, c):
        plan[f"{prefix}.gamma"] = (c,)
        plan[f"{prefix}.beta"] = (c,)

    for lv in range(cfg.levels):
        cin = cfg.in_channels if lv == 0 else cfg.channels(lv - 1)
        cout = cfg.channels(lv)
        k1, k2 = cfg.kernel_plan[lv]
        conv_block(f"enc{lv}.conv1", cin, cout, k1)
        gn_block(f"enc{lv}.gn1", cout)
        conv_block(f"enc{lv}.conv2", cout, cout, k2)
        gn_block(f"enc{lv}.gn2", cout)

    for lv in range(cfg.levels - 2, -1, -1):
        c_f = cfg.channels(lv)
        c_g = cfg.channels(lv + 1)
        c_int = max(c_f // 2, 1)
        conv_block(f"att{lv}.wf", c_f, c_int, 1)
        gn_block(f"att{lv}.gnf", c_int)
        conv_block(f"att{lv}.wg", c_g, c_int, 1)
        gn_block(f"att{lv}.gng", c_int)
        conv_block(f"att{lv}.theta", c_int, 1, 1)
        gn_block(f"att{lv}.gnt", 1)
        conv_block(f"dec{lv}.conv1", c_g + c_f, c_f, 3)
        gn_block(f"dec{lv}.gn1", c_f)
        conv_block(f"dec{lv}.conv2", c_f, c_f, 3)
        gn_block(f"dec{lv}.gn2", c_f)

    if cfg.deep_supervision:
        for lv in range(1, cfg.levels - 1):
            conv_block(f"ds{lv}", cfg.channels(lv), cfg.num_classes, 1)
    conv_block("head", cfg.channels(0), cfg.num_classes, 1)
    return plan


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Instantiate parameters: Kaiming-uniform conv weights from a seeded
    generator, zero biases, unit gammas, zero betas."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_plan(cfg).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:  # biases and betas
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return Model(config=cfg, params=params)


def count_parameters(m: Model) -> int:
    return sum(p.data.size for p in m.params.values())


def _conv_gn_relu(x, m: Model, conv_name: str, gn_name: str, groups: int) -> Tensor:
    out = conv3d(x, m.parameter(f"{conv_name}.w"), m.parameter(f"{conv_name}.b"))
    out = group_norm(out, groups, m.parameter(f"{gn_name}.gamma"), m.parameter(f"{gn_name}.beta"))
    return relu(out)


def attention_gate(m: Model, level: int, f: Tensor, g: Tensor) -> tuple[Tensor, Tensor]:
    """Gate an encoder feature f with a coefficient derived from f and the
    coarser decoder feature g.

    Both inputs are linearly transformed (f through a stride-2 1^3 conv so
    the maps align at g's resolution) and group normalized, summed, and
    passed through ReLU; a 1-channel 1^3 conv, GN, and sigmoid produce the
    coefficient, which is upsampled and multiplied onto f. Returns
    (gated f, upsampled coefficient map).
    """
    if tuple(2 * s for s in g.shape[2:]) != f.shape[2:]:
        raise ShapeError(
            f"attention gate needs g at exactly half of f's spatial size, "
            f"got f {f.shape} and g {g.shape}"
        )
    cfg = m.config
    c_int = max(cfg.channels(level) // 2, 1)
    gi = _attention_groups(cfg, c_int)
    fa = conv3d(f, m.parameter(f"att{level}.wf.w"), m.parameter(f"att{level}.wf.b"),
                stride=2, padding=0)
    fa = group_norm(fa, gi, m.parameter(f"att{level}.gnf.gamma"), m.parameter(f"att{level}.gnf.beta"))
    ga = conv3d(g, m.parameter(f"att{level}.wg.w"), m.parameter(f"att{level}.wg.b"))
    ga = group_norm(ga, gi, m.parameter(f"att{level}.gng.gamma"), m.parameter(f"att{level}.gng.beta"))
    mixed = relu(elementwise_add(fa, ga))
    pre = conv3d(mixed, m.parameter(f"att{level}.theta.w"), m.parameter(f"att{level}.theta.b"))
    pre = group_norm(pre, 1, m.parameter(f"att{level}.gnt.gamma"), m.parameter(f"att{level}.gnt.beta"))
    alpha = sigmoid(pre)
    alpha_up = upsample_trilinear(alpha)
    return elementwise_mul(f, alpha_up), alpha_up


def forward(m: Model, x: Tensor) -> tuple[Tensor, dict[int, np.ndarray]]:
    """Full forward pass; returns class logits and per-level attention maps.

    Output spatial dims equal the input's. With deep supervision on, each
    intermediate decoder level contributes 1^3-projected, upsampled logits
    summed into the head output.
    """
    cfg = m.config
    if x.data.ndim != 5:
        raise ShapeError(f"input must be (N,C,D,H,W), got {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"model expects {cfg.in_channels} input channels, got {x.shape}")
    div = 2 ** (cfg.levels - 1)
    if any(s % div for s in x.shape[2:]):
        raise ShapeError(
            f"spatial dims {x.shape[2:]} must be divisible by {div} for {cfg.levels} levels"
        )

    skips = []
    cur = x
    for lv in range(cfg.levels):
        cur = _conv_gn_relu(cur, m, f"enc{lv}.conv1", f"enc{lv}.gn1", cfg.gn_groups)
        cur = _conv_gn_relu(cur, m, f"enc{lv}.conv2", f"enc{lv}.gn2", cfg.gn_groups)
        skips.append(cur)
        if lv < cfg.levels - 1:
            cur = maxpool3d(cur)

    alphas: dict[int, np.ndarray] = {}
    ds_logits: list[tuple[int, Tensor]] = []
    for lv in range(cfg.levels - 2, -1, -1):
        gated, alpha = attention_gate(m, lv, skips[lv], cur)
        alphas[lv] = alpha.data
        up = upsample_trilinear(cur)
        cur = concat_channels(up, gated)
        cur = _conv_gn_relu(cur, m, f"dec{lv}.conv1", f"dec{lv}.gn1", cfg.gn_groups)
        cur = _conv_gn_relu(cur, m, f"dec{lv}.conv2", f"dec{lv}.gn2", cfg.gn_groups)
        if cfg.deep_supervision and 1 <= lv <= cfg.levels - 2:
            ds_logits.append((lv, conv3d(cur, m.parameter(f"ds{lv}.w"), m.parameter(f"ds{lv}.b"))))

    logits = conv3d(cur, m.parameter("head.w"), m.parameter("head.b"))
    for lv, branch in ds_logits:
        for _ in range(lv):
            branch = upsample_trilinear(branch)
        logits = elementwise_add(logits, branch)
    return logits, alphas


# ---------------------------------------------------------------------------
# checkpoint serialization

def _config_to_lines(cfg: ModelConfig) -> str:
    plan = ";".join(f"{a},{b}" for a, b in cfg.kernel_plan)
    return (
        f"in_channels={cfg.in_channels}\n"
        f"num_classes={cfg.num_classes}\n"
        f"levels={cfg.levels}\n"
        f"base_channels={cfg.base_channels}\n"
        f"gn_groups={cfg.gn_groups}\n"
        f"kernel_plan={plan}\n"
        f"deep_supervision={int(cfg.deep_supervision)}\n"
    )


def _config_from_lines(text: str) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    try:
        plan = tuple(
            tuple(int(x) for x in pair.split(","))
            for pair in kv["kernel_plan"].split(";")
        )
        return ModelConfig(
            in_channels=int(kv["in_channels"]),
            num_classes=int(kv["num_classes"]),
            levels=int(kv["levels"]),
            base_channels=int(kv["base_channels"]),
            gn_groups=int(kv["gn_groups"]),
            kernel_plan=plan,
            deep_supervision=bool(int(kv["deep_supervision"])),
        )
    except KeyError as e:
        raise FormatError(f"checkpoint config block is missing key {e}") from e


def save_checkpoint(m: Model, path) -> None:
    """Write parameters and config; parameters are stored as float32."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(m.params))]
    for name, p in m.params.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<B", 0))  # dtype 0 = float32
        chunks.append(arr.tobytes())
    chunks.append(_config_to_lines(m.config).encode("utf-8"))
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Model:
    """Read a checkpoint and reconstruct the model bit-exactly."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    name = "<header>"
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}Q", raw, off)
            off += 8 * rank
            (dt,) = struct.unpack_from("<B", raw, off)
            off += 1
            if dt != 0:
                raise FormatError(f"{path}: tensor {name!r} has unsupported dtype code {dt}")
            nbytes = int(np.prod(shape)) * 4
            payload = raw[off : off + nbytes]
            if len(payload) != nbytes:
                raise IntegrityError(
                    f"{path}: payload for tensor {name!r} truncated "
                    f"({len(payload)} of {nbytes} bytes)"
                )
            off += nbytes
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    except struct.error as e:
        raise IntegrityError(f"{path}: checkpoint truncated near tensor {name!r}") from e

    cfg = _config_from_lines(raw[off:].decode("utf-8"))
    plan = parameter_plan(cfg)
    missing = sorted(set(plan) - set(tensors))
    if missing:
        raise IntegrityError(f"{path}: checkpoint is missing parameters {missing}")
    extra = sorted(set(tensors) - set(plan))
    if extra:
        raise IntegrityError(f"{path}: checkpoint has unexpected parameters {extra}")
    params = {}
    for pname, shape in plan.items():
        arr = tensors[pname]
        if tuple(arr.shape) != shape:
            raise IntegrityError(
                f"{path}: parameter {pname!r} has shape {arr.shape}, expected {shape}"
            )
        params[pname] = Tensor(arr, requires_grad=True)
    return Model(config=cfg, params=params)
