"""Action- and timestep-conditioned denoiser.

Two input tokens (noisy target, current context) run through residual
blocks whose sublayers are modulated by AdaLN scale/shift/gate heads;
the context token cross-attends to a bank of projected memory tokens.
All data inputs are batched as rows (rank-2), so one forward serves a
whole batch of samples or planning candidates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, asdict

import numpy as np
import yaml

from . import autodiff as ad
from .autodiff import ADALN, BACKBONE, ParamStore

CHECKPOINT_MAGIC = b"MWM1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int = 32
    hidden: int = 128
    blocks: int = 4
    memory: int = 3
    embed: int = 32
    init_seed: int = 0

    def __post_init__(self):
        if min(self.hidden, self.blocks, self.embed) <= 0 or self.memory < 0:
            raise ValueError(f"invalid model config {self}")
        if self.embed % 2 != 0:
            raise ValueError("embed dim must be even (sin/cos pairs)")


def sincos_features(x: np.ndarray, n_bands: int) -> np.ndarray:
    """Interleaved [sin, cos] features over geometric wavelengths 1..1e4."""
    x = np.asarray(x, dtype=np.float64)
    wavelengths = np.geomspace(1.0, 1e4, n_bands) if n_bands > 1 else np.ones(1)
    ang = x[:, None] / wavelengths[None, :]
    out = np.empty((x.shape[0], 2 * n_bands))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def condition_features(actions: np.ndarray, t, embed: int, n: int) -> np.ndarray:
    """Raw sin-cos features of (v, w, t), concatenated per row: (n, 3*embed)."""
    actions = np.asarray(actions, dtype=np.float64).reshape(n, 2)
    t_arr = np.full(n, float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
    bands = embed // 2
    return np.concatenate(
        [
            sincos_features(actions[:, 0], bands),
            sincos_features(actions[:, 1], bands),
            sincos_features(t_arr, bands),
        ],
        axis=1,
    )


class Denoiser:
    """Clean-target (x0) predictor conditioned on context, memory and action."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.params = ParamStore()
        self._ones_col = np.ones((cfg.hidden, 1), dtype=dtype)
        self._init_params()

    # -- parameters ----------------------------------------------------------

    def _init_params(self):
        cfg = self.cfg
        rng = np.random.default_rng(cfg.init_seed)
        D, H, E = cfg.obs_dim, cfg.hidden, cfg.embed

        def w(name, fan_in, shape, group=BACKBONE):
            arr = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
            return self.params.add(name, arr, group, dtype=self.dtype)

        def b(name, shape, group=BACKBONE):
            return self.params.add(name, np.zeros(shape), group, dtype=self.dtype)

        for tok in ("tok_s", "tok_c", "tok_m"):
            w(f"{tok}.W", D, (D, H))
            b(f"{tok}.b", (H,))
        if cfg.memory > 0:
            self.params.add(
                "mem_pos",
                rng.normal(0.0, 0.1, size=(cfg.memory, H)),
                BACKBONE,
                dtype=self.dtype,
            )
        w("cond.W1", 3 * E, (3 * E, H))
        b("cond.b1", (H,))
        w("cond.W2", H, (H, H))
        b("cond.b2", (H,))
        for i in range(cfg.blocks):
            for mat in ("Wq", "Wk", "Wv", "Wo"):
                w(f"block{i}.attn.{mat}", H, (H, H))
            b(f"block{i}.attn.bo", (H,))
            w(f"block{i}.mlp.W1", H, (H, H))
            b(f"block{i}.mlp.b1", (H,))
            w(f"block{i}.mlp.W2", H, (H, H))
            b(f"block{i}.mlp.b2", (H,))
            # fused modulation head per sublayer emits (gamma-1, beta, gate);
            # zero init makes every block an identity map at start
            for sub in ("attn", "mlp"):
                b(f"block{i}.mod.{sub}.W", (H, 3 * H), group=ADALN)
                b(f"block{i}.mod.{sub}.b", (3 * H,), group=ADALN)
        w("out.W", 2 * H, (2 * H, D))
        b("out.b", (D,))

    def partition_params(self):
        return self.params.partition()

    # -- forward -------------------------------------------------------------

    def embed_condition(self, actions, t, n: int | None = None) -> ad.Tensor:
        """Shared condition vector c for the modulation heads; (n, hidden)."""
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
        if n is None:
            n = actions.shape[0]
        feats = condition_features(actions, t, self.cfg.embed, n).astype(self.dtype)
        p = self.params
        h = ad.gelu(ad.add(ad.matmul(ad.constant(feats), p["cond.W1"]), p["cond.b1"]))
        return ad.add(ad.matmul(h, p["cond.W2"]), p["cond.b2"])

    def _modulation(self, c: ad.Tensor, block: int, sub: str, n: int, tile: int = 1):
        """Per-sublayer (gamma, beta, gate), each (tile*n, hidden)."""
        p = self.params
        H = self.cfg.hidden
        raw = ad.add(ad.matmul(c, p[f"block{block}.mod.{sub}.W"]),
                     p[f"block{block}.mod.{sub}.b"])
        gamma = ad.add(ad.slice_(raw, (slice(None), slice(0, H))), 1.0)
        beta = ad.slice_(raw, (slice(None), slice(H, 2 * H)))
        gate = ad.slice_(raw, (slice(None), slice(2 * H, 3 * H)))
        if tile > 1:
            gamma = ad.concat([gamma] * tile, axis=0)
            beta = ad.concat([beta] * tile, axis=0)
            gate = ad.concat([gate] * tile, axis=0)
        return gamma, beta, gate

    def _attend(self, x_c: ad.Tensor, mem_stack: ad.Tensor, block: int,
                c: ad.Tensor, n: int) -> ad.Tensor:
        p = self.params
        m = self.cfg.memory
        gamma, beta, gate = self._modulation(c, block, "attn", n)
        h = ad.add(ad.mul(ad.layernorm(x_c), gamma), beta)
        q = ad.matmul(h, p[f"block{block}.attn.Wq"])
        keys = ad.matmul(mem_stack, p[f"block{block}.attn.Wk"])
        vals = ad.matmul(mem_stack, p[f"block{block}.attn.Wv"])
        ones = ad.constant(self._ones_col)
        cols = []
        for j in range(m):
            kj = ad.slice_(keys, (slice(j * n, (j + 1) * n),))
            cols.append(ad.matmul(ad.mul(q, kj), ones))  # (n, 1)
        scores = ad.scale(ad.concat(cols, axis=1), 1.0 / np.sqrt(self.cfg.hidden))
        weights = ad.softmax(scores)  # (n, m)
        att = None
        for j in range(m):
            vj = ad.slice_(vals, (slice(j * n, (j + 1) * n),))
            wj = ad.slice_(weights, (slice(None), slice(j, j + 1)))
            term = ad.mul(wj, vj)
            att = term if att is None else ad.add(att, term)
        att = ad.add(ad.matmul(att, p[f"block{block}.attn.Wo"]),
                     p[f"block{block}.attn.bo"])
        return ad.add(x_c, ad.mul(gate, att))

    def _mlp_pair(self, x_s: ad.Tensor, x_c: ad.Tensor, block: int,
                  c: ad.Tensor, n: int):
        """MLP sublayer over both token streams, stacked into one pass."""
        p = self.params
        gamma, beta, gate = self._modulation(c, block, "mlp", n, tile=2)
        x = ad.concat([x_s, x_c], axis=0)
        h = ad.add(ad.mul(ad.layernorm(x), gamma), beta)
        h = ad.gelu(ad.add(ad.matmul(h, p[f"block{block}.mlp.W1"]),
                           p[f"block{block}.mlp.b1"]))
        h = ad.add(ad.matmul(h, p[f"block{block}.mlp.W2"]), p[f"block{block}.mlp.b2"])
        out = ad.add(x, ad.mul(gate, h))
        return (ad.slice_(out, (slice(0, n),)),
                ad.slice_(out, (slice(n, 2 * n),)))

    def forward(self, s_t, t, ctx, mem, actions) -> ad.Tensor:
        """Clean-target estimate for a batch of rows.

        s_t, ctx: (n, obs_dim); mem: (n, memory, obs_dim), most recent slot
        first; actions: (n, 2); t: int or per-row integer array.
        """
        cfg = self.cfg
        p = self.params
        s_t = np.asarray(s_t, dtype=self.dtype)
        ctx = np.asarray(ctx, dtype=self.dtype)
        mem = np.asarray(mem, dtype=self.dtype)
        if s_t.ndim != 2 or s_t.shape[1] != cfg.obs_dim:
            raise ad.ContractViolation(f"denoise: bad target shape {s_t.shape}")
        if ctx.shape != s_t.shape:
            raise ad.ContractViolation(
                f"denoise: context shape {ctx.shape} vs target {s_t.shape}"
            )
        n = s_t.shape[0]
        if mem.shape != (n, cfg.memory, cfg.obs_dim):
            raise ad.ContractViolation(
                f"denoise: memory shape {mem.shape}, expected {(n, cfg.memory, cfg.obs_dim)}"
            )

        c = self.embed_condition(actions, t, n)
        x_s = ad.add(ad.matmul(ad.constant(s_t), p["tok_s.W"]), p["tok_s.b"])
        x_c = ad.add(ad.matmul(ad.constant(ctx), p["tok_c.W"]), p["tok_c.b"])
        mem_stack = None
        if cfg.memory > 0:
            # slot-major stack: rows [j*n:(j+1)*n] hold memory slot j
            flat = mem.transpose(1, 0, 2).reshape(cfg.memory * n, cfg.obs_dim)
            toks = ad.add(ad.matmul(ad.constant(flat), p["tok_m.W"]), p["tok_m.b"])
            ones_n = ad.constant(np.ones((n, 1), dtype=self.dtype))
            pos = ad.concat(
                [ad.matmul(ones_n, ad.slice_(p["mem_pos"], (slice(j, j + 1),)))
                 for j in range(cfg.memory)],
                axis=0,
            )
            mem_stack = ad.add(toks, pos)

        for i in range(cfg.blocks):
            if mem_stack is not None:
                x_c = self._attend(x_c, mem_stack, i, c, n)
            x_s, x_c = self._mlp_pair(x_s, x_c, i, c, n)

        stream = ad.concat([x_s, x_c], axis=1)
        return ad.add(ad.matmul(stream, p["out.W"]), p["out.b"])

    def predict(self, s_t, t, ctx, mem, actions) -> np.ndarray:
        """Gradient-free forward."""
        with ad.no_grad():
            return self.forward(s_t, t, ctx, mem, actions).value

    def closure(self, ctx, mem, actions):
        """denoise_fn(s, t, with_grad) over fixed conditioning, for the
        reverse-process loop."""

        def fn(s, t, with_grad):
            if with_grad:
                return self.forward(s, t, ctx, mem, actions)
            return self.predict(s, t, ctx, mem, actions)

        return fn


# ---------------------------------------------------------------------------
# checkpoints

_GROUP_CODE = {BACKBONE: 0, ADALN: 1}
_CODE_GROUP = {v: k for k, v in _GROUP_CODE.items()}


def save_checkpoint(path, params: ParamStore, meta: dict | None = None) -> None:
    """Binary tensor container plus a YAML sidecar with config metadata."""
    names = params.names()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            tensor = params[name]
            data = np.ascontiguousarray(tensor.value, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _GROUP_CODE[params.group(name)], data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
    if meta is not None:
        with open(f"{path}.meta.yaml", "w") as fh:
            yaml.safe_dump(meta, fh, sort_keys=True)


def load_checkpoint(path):
    """Returns (values: name -> array, groups: name -> tag, meta or None)."""
    values: dict[str, np.ndarray] = {}
    groups: dict[str, str] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            group_code, rank = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * n_items), dtype="<f4").reshape(shape)
            values[name] = np.array(data)
            groups[name] = _CODE_GROUP[group_code]
    meta = None
    try:
        with open(f"{path}.meta.yaml") as fh:
            meta = yaml.safe_load(fh)
    except FileNotFoundError:
        pass
    return values, groups, meta


def denoiser_from_checkpoint(path, dtype=np.float32) -> Denoiser:
    values, _groups, meta = load_checkpoint(path)
    if meta is None or "model" not in meta:
        raise ValueError(f"{path}: missing model config sidecar")
    model = Denoiser(ModelConfig(**meta["model"]), dtype=dtype)
    model.params.set_values(values)
    return model


def checkpoint_meta(cfg: ModelConfig, diffusion: dict | None = None) -> dict:
    meta = {"model": asdict(cfg)}
    if diffusion:
        meta["diffusion"] = dict(diffusion)
    return meta
