"""Learnable scene representation.

A scene is decomposed into a static environment, a set of rigid actors, and a
sky that depends only on view direction.  Environment and actor geometry live
in multi-resolution hash grids; actors additionally blend a static 3D grid
with a dynamic 4D (space + time) grid through a small ratio MLP, so parts of
an actor that never change are free to ignore time.  A shared decoder turns
either feature into an implicit geometry scalar ``s`` plus an appearance
feature ``f``; the renderer converts ``s`` to opacity and ``f`` to color.

Hash encoding is normative for checkpoints: level ``l`` has resolution
``floor(base * growth**l)``; a lattice corner ``c`` hashes to
``XOR_d(c_d * P_d mod 2^32) mod T`` with primes ``P = (1, 2654435761,
805459861, 3674653429)`` and ``T`` a power of two.  Corner entries are
combined by multilinear interpolation and levels are concatenated.

All learnable arrays are torch tensors so gradients come from autograd; the
finite-difference checker in :mod:`rerig.optim` is the authority that those
gradients are right.  Models can be built at float64 for checking and float32
for training.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .geometry import ActorTrack, track_from_json, track_to_json
from .optim import ParamVector

# scatter-style backward passes must be reproducible run to run
torch.use_deterministic_algorithms(True)

HASH_PRIMES = (1, 2654435761, 805459861, 3674653429)

CHECKPOINT_MAGIC = b"RGSM"
CHECKPOINT_VERSION = 1

# a feature vector is just a 1-D (or batched) tensor of finite reals
FeatureVector = torch.Tensor


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    table_size: int = 2 ** 14
    features_per_level: int = 2
    base_resolution: int = 16
    growth_factor: float = 1.5
    input_dims: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.features_per_level < 1:
            raise ValueError("features_per_level must be >= 1")
        if self.base_resolution < 1:
            raise ValueError("base_resolution must be >= 1")
        if self.growth_factor <= 1.0:
            raise ValueError("growth_factor must be > 1")
        if self.input_dims not in (3, 4):
            raise ValueError("input_dims must be 3 or 4")

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def resolutions(self) -> tuple[int, ...]:
        return tuple(int(self.base_resolution * self.growth_factor ** l)
                     for l in range(self.levels))


@dataclass
class HashGrid:
    """Config plus one (levels, table_size, features) tensor of entries."""

    config: HashGridConfig
    tables: torch.Tensor

    def __post_init__(self):
        expect = (self.config.levels, self.config.table_size,
                  self.config.features_per_level)
        if tuple(self.tables.shape) != expect:
            raise ValueError(f"table shape {tuple(self.tables.shape)} != {expect}")


def _hash_corners(corner: torch.Tensor, table_size: int) -> torch.Tensor:
    """corner: integer lattice coords (..., dims) -> table index (...,)."""
    h = (corner[..., 0] * HASH_PRIMES[0]) & 0xFFFFFFFF
    for d in range(1, corner.shape[-1]):
        h = h ^ ((corner[..., d] * HASH_PRIMES[d]) & 0xFFFFFFFF)
    return h & (table_size - 1)


def hash_encode(grid: HashGrid, x) -> tuple[torch.Tensor, torch.Tensor]:
    """Encode normalized coords x in [0,1]^dims.

    Returns (features (..., levels*F), out_of_bounds (...,)).  Coords outside
    the unit cube are clamped and flagged rather than rejected.
    """
    cfg = grid.config
    x = torch.as_tensor(x, dtype=grid.tables.dtype)
    if x.shape[-1] != cfg.input_dims:
        raise ValueError(
            f"expected {cfg.input_dims}-D coords, got {x.shape[-1]}-D")
    oob = ((x < 0.0) | (x > 1.0)).any(dim=-1)
    x = x.clamp(0.0, 1.0)

    feats = []
    for level, n in enumerate(cfg.resolutions()):
        pos = x * n
        cell = torch.floor(pos)
        frac = pos - cell
        cell = cell.to(torch.int64)
        table = grid.tables[level]
        acc = None
        for bits in range(1 << cfg.input_dims):
            offs = [(bits >> d) & 1 for d in range(cfg.input_dims)]
            corner = cell + torch.tensor(offs, dtype=torch.int64)
            idx = _hash_corners(corner, cfg.table_size)
            w = frac[..., 0] if offs[0] else 1.0 - frac[..., 0]
            for d in range(1, cfg.input_dims):
                w = w * (frac[..., d] if offs[d] else 1.0 - frac[..., d])
            term = table[idx] * w.unsqueeze(-1)
            acc = term if acc is None else acc + term
        feats.append(acc)
    return torch.cat(feats, dim=-1), oob


@dataclass(frozen=True)
class Mlp:
    """Layer widths plus the parameter-name prefix; weights live in the model.

    Hidden activation is ReLU; the output is linear and any squashing
    (sigmoid for the ratio head, none for the decoder/sky) is applied by the
    caller so each use site documents its own range.
    """

    prefix: str
    widths: tuple[int, ...]  # (in, hidden..., out)

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for i in range(self.n_layers):
            shapes.append((f"{self.prefix}.w{i}", (self.widths[i + 1], self.widths[i])))
            shapes.append((f"{self.prefix}.b{i}", (self.widths[i + 1],)))
        return shapes

    def forward(self, params: dict, x: torch.Tensor) -> torch.Tensor:
        for i in range(self.n_layers):
            x = x @ params[f"{self.prefix}.w{i}"].T + params[f"{self.prefix}.b{i}"]
            if i < self.n_layers - 1:
                x = torch.relu(x)
        return x


@dataclass(frozen=True)
class SceneModelConfig:
    env_grid: HashGridConfig = HashGridConfig()
    actor_static_grid: HashGridConfig = HashGridConfig(
        levels=4, table_size=2 ** 12, input_dims=3)
    actor_dynamic_grid: HashGridConfig = HashGridConfig(
        levels=4, table_size=2 ** 12, input_dims=4)
    embed_dim: int = 4
    f_app: int = 8
    hidden: int = 32
    decoder_width: int = 16
    sky_octaves: int = 4
    upsample_hidden: int = 16

    def __post_init__(self):
        if self.actor_static_grid.input_dims != 3:
            raise ValueError("actor static grid must be 3-D")
        if self.actor_dynamic_grid.input_dims != 4:
            raise ValueError("actor dynamic grid must be 4-D")
        if self.actor_static_grid.output_dim != self.actor_dynamic_grid.output_dim:
            raise ValueError("actor grids must agree on feature width")
        if self.f_app < 3:
            raise ValueError("need at least 3 appearance channels for color")

    @property
    def env_feature_dim(self) -> int:
        return self.env_grid.output_dim

    @property
    def actor_feature_dim(self) -> int:
        return self.actor_static_grid.output_dim + self.embed_dim

    @property
    def sky_input_dim(self) -> int:
        return 3 * 2 * self.sky_octaves

    def to_json(self) -> dict:
        return {
            "env_grid": asdict(self.env_grid),
            "actor_static_grid": asdict(self.actor_static_grid),
            "actor_dynamic_grid": asdict(self.actor_dynamic_grid),
            "embed_dim": self.embed_dim,
            "f_app": self.f_app,
            "hidden": self.hidden,
            "decoder_width": self.decoder_width,
            "sky_octaves": self.sky_octaves,
            "upsample_hidden": self.upsample_hidden,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneModelConfig":
        return cls(
            env_grid=HashGridConfig(**obj["env_grid"]),
            actor_static_grid=HashGridConfig(**obj["actor_static_grid"]),
            actor_dynamic_grid=HashGridConfig(**obj["actor_dynamic_grid"]),
            embed_dim=obj["embed_dim"], f_app=obj["f_app"],
            hidden=obj["hidden"], decoder_width=obj["decoder_width"],
            sky_octaves=obj["sky_octaves"],
            upsample_hidden=obj["upsample_hidden"],
        )


class SceneModel:
    """All learnable state plus the scene metadata needed to evaluate it.

    Parameters are a name -> leaf-tensor dict in a fixed order so the flat
    ParamVector view and the checkpoint layout are stable.  ``extras`` is an
    opaque JSON dict persisted with checkpoints (rig, frame timestamps, ego
    poses) so rendering can run from a checkpoint alone.
    """

    def __init__(self, config: SceneModelConfig, tracks: Sequence[ActorTrack],
                 scene_aabb, time_range: tuple[float, float], seed: int = 0,
                 dtype=torch.float32, extras: dict | None = None):
        aabb = np.asarray(scene_aabb, dtype=np.float64)
        if aabb.shape != (2, 3) or not np.all(aabb[1] > aabb[0]):
            raise ValueError("scene_aabb must be [[min_xyz], [max_xyz]] with max > min")
        t0, t1 = float(time_range[0]), float(time_range[1])
        if not t1 > t0:
            raise ValueError("time_range must satisfy t1 > t0")
        self.config = config
        self.tracks = tuple(tracks)
        self.actor_index = {trk.actor_id: i for i, trk in enumerate(self.tracks)}
        if len(self.actor_index) != len(self.tracks):
            raise ValueError("duplicate actor_id in tracks")
        self.scene_aabb = aabb
        self.time_range = (t0, t1)
        self.seed = int(seed)
        self.dtype = dtype
        self.extras = dict(extras or {})

        c = config
        grid_dim = c.actor_static_grid.output_dim
        self.ratio_mlp = Mlp("ratio_mlp", (2 * grid_dim, c.hidden, c.hidden, 1))
        self.decoder_mlp = Mlp("decoder_mlp",
                               (c.decoder_width, c.hidden, c.hidden, 1 + c.f_app))
        self.sky_mlp = Mlp("sky_mlp", (c.sky_input_dim, c.hidden, c.hidden, c.f_app))

        self.params: dict[str, torch.Tensor] = {}
        self._build_params()
        self.env_grid = HashGrid(c.env_grid, self.params["env_grid.tables"])
        self.actor_static_grid = HashGrid(c.actor_static_grid,
                                          self.params["actor_static.tables"])
        self.actor_dynamic_grid = HashGrid(c.actor_dynamic_grid,
                                           self.params["actor_dynamic.tables"])

    # ---------------------------------------------------------------- init

    def _build_params(self) -> None:
        c = self.config
        rng = np.random.default_rng([self.seed])

        def add(name, array):
            t = torch.as_tensor(np.ascontiguousarray(array), dtype=self.dtype)
            t.requires_grad_(True)
            self.params[name] = t

        def add_table(name, grid_cfg):
            shape = (grid_cfg.levels, grid_cfg.table_size,
                     grid_cfg.features_per_level)
            add(name, rng.uniform(-1e-4, 1e-4, size=shape))

        def add_mlp(mlp: Mlp):
            for pname, shape in mlp.param_shapes():
                if pname.rsplit(".", 1)[-1].startswith("b"):
                    add(pname, np.zeros(shape))
                else:
                    bound = 1.0 / np.sqrt(shape[1])
                    add(pname, rng.uniform(-bound, bound, size=shape))

        add_table("env_grid.tables", c.env_grid)
        add_table("actor_static.tables", c.actor_static_grid)
        add_table("actor_dynamic.tables", c.actor_dynamic_grid)
        add("actor_embed", rng.uniform(-0.1, 0.1, size=(len(self.tracks), c.embed_dim)))
        add_mlp(self.ratio_mlp)

        # projections to the common decoder width (linear, no activation)
        for pname, in_dim in (("env_proj", c.env_feature_dim),
                              ("actor_proj", c.actor_feature_dim)):
            bound = 1.0 / np.sqrt(in_dim)
            add(f"{pname}.w", rng.uniform(-bound, bound,
                                          size=(c.decoder_width, in_dim)))
            add(f"{pname}.b", np.zeros(c.decoder_width))

        add_mlp(self.decoder_mlp)
        add_mlp(self.sky_mlp)

        # color head starts as a pass-through of the first 3 feature channels
        head_w = np.zeros((3, c.f_app))
        head_w[:, :3] = np.eye(3)
        add("rgb_head.w", head_w)
        add("rgb_head.b", np.zeros(3))

        self._build_upsampler(add)

    def _build_upsampler(self, add) -> None:
        """Three 3x3 convs initialized to reproduce the direct color head.

        ReLU cannot pass negative features, so the identity route splits each
        of the first three channels into +/- rails (relu(x) - relu(-x) == x)
        and the last conv recombines them.  At scale 1 the whole stack then
        equals sigmoid of feature channels 0..2, bit for bit.
        """
        c = self.config
        h = c.upsample_hidden
        in_ch = c.f_app + 1  # appearance feature + opacity plane
        if h < 6:
            raise ValueError("upsample_hidden must be >= 6 for identity init")
        w0 = np.zeros((h, in_ch, 3, 3))
        for ch in range(3):
            w0[ch, ch, 1, 1] = 1.0
            w0[ch + 3, ch, 1, 1] = -1.0
        for k in range(min(in_ch - 3, h - 6)):
            w0[6 + k, 3 + k, 1, 1] = 1.0
        add("up.c0.w", w0)
        add("up.c0.b", np.zeros(h))
        w1 = np.zeros((h, h, 3, 3))
        for ch in range(h):
            w1[ch, ch, 1, 1] = 1.0
        add("up.c1.w", w1)
        add("up.c1.b", np.zeros(h))
        w2 = np.zeros((3, h, 3, 3))
        for ch in range(3):
            w2[ch, ch, 1, 1] = 1.0
            w2[ch, ch + 3, 1, 1] = -1.0
        add("up.c2.w", w2)
        add("up.c2.b", np.zeros(3))

    # ------------------------------------------------------- flat parameters

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(self.params.keys())

    def param_vector(self) -> ParamVector:
        return ParamVector.from_arrays(
            [(name, t.detach().numpy().astype(np.float64, copy=True))
             for name, t in self.params.items()])

    def load_param_vector(self, pv: ParamVector) -> None:
        if pv.names != self.param_names:
            raise ValueError("parameter layout mismatch")
        with torch.no_grad():
            for name, t in self.params.items():
                flat = pv.segment(name)
                if flat.size != t.numel():
                    raise ValueError(f"segment {name!r} has wrong length")
                t.copy_(torch.as_tensor(flat.reshape(tuple(t.shape)),
                                        dtype=self.dtype))

    def grad_vector(self) -> ParamVector:
        parts = []
        for name, t in self.params.items():
            g = t.grad
            arr = (np.zeros(t.numel()) if g is None
                   else g.detach().numpy().astype(np.float64, copy=True).reshape(-1))
            parts.append((name, arr))
        return ParamVector.from_arrays(parts)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None


# ------------------------------------------------------------- field ops


def env_encode(model: SceneModel, x_world) -> tuple[torch.Tensor, torch.Tensor]:
    """World-space point(s) -> environment feature v_e.

    Points are normalized against the scene bounds; anything outside is
    clamped to the boundary and flagged in the returned mask.
    """
    x = torch.as_tensor(np.asarray(x_world, dtype=np.float64),
                        dtype=model.params["env_grid.tables"].dtype)
    lo = torch.as_tensor(model.scene_aabb[0], dtype=x.dtype)
    hi = torch.as_tensor(model.scene_aabb[1], dtype=x.dtype)
    u = (x - lo) / (hi - lo)
    return hash_encode(model.env_grid, u)


def actor_encode(model: SceneModel, actor_id: str, x_local, t) -> torch.Tensor:
    """Box-local point(s) in [-1,1]^3 at time t -> actor feature v_a.

    The static 3-D grid and the dynamic 4-D grid are blended by a learned
    per-point ratio w in (0,1); the per-actor embedding is appended after
    the blend so it tags appearance without being hashed.
    """
    if actor_id not in model.actor_index:
        raise KeyError(f"unknown actor_id {actor_id!r}")
    dtype = model.params["actor_static.tables"].dtype
    x = torch.as_tensor(np.asarray(x_local, dtype=np.float64), dtype=dtype)
    u = ((x + 1.0) * 0.5).clamp(0.0, 1.0)
    t0, t1 = model.time_range
    tau = torch.as_tensor(np.asarray(t, dtype=np.float64), dtype=dtype)
    tau = ((tau - t0) / (t1 - t0)).clamp(0.0, 1.0)
    tau = tau.expand(u.shape[:-1]) if tau.ndim == 0 else tau
    v_static, _ = hash_encode(model.actor_static_grid, u)
    v_dyn, _ = hash_encode(model.actor_dynamic_grid,
                           torch.cat([u, tau.unsqueeze(-1)], dim=-1))
    w = torch.sigmoid(
        model.ratio_mlp.forward(model.params,
                                torch.cat([v_static, v_dyn], dim=-1)))
    blend = w * v_static + (1.0 - w) * v_dyn
    emb = model.params["actor_embed"][model.actor_index[actor_id]]
    emb = emb.expand(*blend.shape[:-1], emb.shape[-1])
    return torch.cat([blend, emb], dim=-1)


def decode(model: SceneModel, v: torch.Tensor,
           kind: str | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Shared decoder: feature -> (geometry logit s, appearance feature f).

    Environment and actor features have different widths; each goes through
    its own linear projection to the common decoder width.  The branch is
    picked by width, or forced with kind="env"/"actor" if the widths tie.
    """
    c = model.config
    dim = v.shape[-1]
    if kind is None:
        if c.env_feature_dim == c.actor_feature_dim:
            raise ValueError("feature widths tie; pass kind='env' or 'actor'")
        if dim == c.env_feature_dim:
            kind = "env"
        elif dim == c.actor_feature_dim:
            kind = "actor"
        else:
            raise ValueError(
                f"dimension mismatch: got {dim}, expected "
                f"{c.env_feature_dim} (env) or {c.actor_feature_dim} (actor)")
    expected = c.env_feature_dim if kind == "env" else c.actor_feature_dim
    if dim != expected:
        raise ValueError(f"dimension mismatch: got {dim}, expected {expected}")
    proj = "env_proj" if kind == "env" else "actor_proj"
    h = v @ model.params[f"{proj}.w"].T + model.params[f"{proj}.b"]
    out = model.decoder_mlp.forward(model.params, h)
    return out[..., 0], out[..., 1:]


def sky_eval(model: SceneModel, d) -> tuple[torch.Tensor, torch.Tensor]:
    """Direction-only sky feature.

    Directions are renormalized (and flagged) if not unit length, then
    frequency-encoded with sin/cos at `sky_octaves` octaves per component.
    """
    dtype = model.params["sky_mlp.w0"].dtype
    d = torch.as_tensor(np.asarray(d, dtype=np.float64), dtype=dtype)
    norm = torch.linalg.vector_norm(d, dim=-1, keepdim=True)
    if torch.any(norm == 0):
        raise ValueError("zero-length direction")
    renormed = (torch.abs(norm.squeeze(-1) - 1.0) > 1e-6)
    d = d / norm
    parts = []
    for k in range(model.config.sky_octaves):
        ang = d * (np.pi * 2.0 ** k)
        parts.extend([torch.sin(ang), torch.cos(ang)])
    enc = torch.cat(parts, dim=-1)
    return model.sky_mlp.forward(model.params, enc), renormed


# ------------------------------------------------------------- checkpoints


def save_checkpoint(model: SceneModel, path) -> None:
    """Write the model to the single-file binary format (version 1)."""
    meta = {
        "config": model.config.to_json(),
        "aabb": model.scene_aabb.tolist(),
        "time_range": list(model.time_range),
        "seed": model.seed,
        "tracks": [track_to_json(trk) for trk in model.tracks],
        "extras": model.extras,
    }
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(model.params)))
        for name, tensor in model.params.items():
            data = tensor.detach().numpy().astype("<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path, dtype=torch.float32) -> SceneModel:
    """Read a version-1 checkpoint; unknown magic or version is an error."""
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ValueError("not a scene checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", view, 8)
    off = 12
    meta = json.loads(bytes(view[off:off + blob_len]).decode("utf-8"))
    off += blob_len

    model = SceneModel(
        SceneModelConfig.from_json(meta["config"]),
        [track_from_json(t) for t in meta["tracks"]],
        np.array(meta["aabb"]), tuple(meta["time_range"]),
        seed=meta.get("seed", 0), dtype=dtype, extras=meta.get("extras"),
    )

    (n_params,) = struct.unpack_from("<I", view, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<I", view, off)
        off += 4
        name = bytes(view[off:off + name_len]).decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", view, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(view, dtype="<f4", count=count, offset=off).copy()
        off += 4 * count
        arrays[name] = data.reshape(shape)

    if set(arrays) != set(model.param_names):
        raise ValueError("checkpoint parameters do not match model layout")
    with torch.no_grad():
        for name, arr in arrays.items():
            t = model.params[name]
            if tuple(arr.shape) != tuple(t.shape):
                raise ValueError(f"checkpoint shape mismatch for {name!r}")
            t.copy_(torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype))
    return model
