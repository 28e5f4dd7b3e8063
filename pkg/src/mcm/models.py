"""Model components: the conditional epsilon-prediction backbone shared by
teacher and student, a frozen random feature network, and the lightweight
conditional discriminator heads.

The backbone is a residual MLP over non-overlapping patch embeddings of the
latent grid, with an additive sinusoidal timestep embedding and a learned
class-embedding table whose last row is the unconditional (null) token.
Teacher and student are two instances with identical parameter layouts, so a
student is initialized by copying the teacher's ParamSet.
"""

from __future__ import annotations

import numpy as np

from . import tape
from .errors import ConfigError, ContractError, StructuralError
from .params import ParamSet
from .tape import Tensor


def sinusoidal_table(n_rows: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table; row n embeds timestep index n."""
    half = dim // 2
    pos = np.arange(n_rows, dtype=np.float64)[:, None]
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / max(half - 1, 1))
    ang = pos * freqs[None, :]
    table = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if table.shape[1] < dim:
        table = np.concatenate([table, np.zeros((n_rows, dim - table.shape[1]))], axis=1)
    return table


def token_rows(cs, num_classes: int) -> np.ndarray:
    """Map tokens (class id or None) to embedding-table rows; None is the last row."""
    rows = np.empty(len(cs), dtype=np.int64)
    for i, c in enumerate(cs):
        if c is None:
            rows[i] = num_classes
        else:
            c = int(c)
            if not (0 <= c < num_classes):
                raise ContractError(f"class token {c} outside [0, {num_classes})")
            rows[i] = c
    return rows


def _patchify(x: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B * P, C * patch * patch) with P = (H/patch) * (W/patch)."""
    b, c, h, w = x.shape
    hn, wn = h // patch, w // patch
    x = tape.reshape(x, (b, c, hn, patch, wn, patch))
    x = tape.transpose(x, (0, 2, 4, 1, 3, 5))
    return tape.reshape(x, (b * hn * wn, c * patch * patch))


def _unpatchify(x: Tensor, b: int, c: int, h: int, w: int, patch: int) -> Tensor:
    hn, wn = h // patch, w // patch
    x = tape.reshape(x, (b, hn, wn, c, patch, patch))
    x = tape.transpose(x, (0, 3, 1, 4, 2, 5))
    return tape.reshape(x, (b, c, h, w))


def _lift_params(params: ParamSet, requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _as_batch_tensor(xs, expect_shape) -> Tensor:
    x = xs if isinstance(xs, Tensor) else Tensor(np.asarray(xs, dtype=np.float64))
    if x.shape[1:] != expect_shape:
        raise StructuralError(f"input grid shape {x.shape[1:]} != model shape {expect_shape}")
    return x


class DenoiserModel:
    """Conditional epsilon-prediction network over latent grids."""

    def __init__(self, num_classes: int, channels: int, height: int, width: int,
                 n_timesteps: int, d_model: int = 64, n_blocks: int = 2, patch: int = 4,
                 params: ParamSet | None = None):
        if height % patch or width % patch:
            raise ConfigError(f"patch {patch} must divide grid {height}x{width}")
        self.num_classes = num_classes
        self.channels = channels
        self.height = height
        self.width = width
        self.n_timesteps = n_timesteps
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.patch = patch
        self.patch_dim = channels * patch * patch
        self.params = params if params is not None else self._zero_params()
        self._time = Tensor(sinusoidal_table(n_timesteps + 1, d_model))
        self.calls = 0     # per-sample forward evaluations
        self.batches = 0   # batched forward invocations

    # parameter layout -------------------------------------------------------

    def _segment_shapes(self) -> dict[str, tuple[int, ...]]:
        d, dp = self.d_model, self.patch_dim
        shapes: dict[str, tuple[int, ...]] = {
            "embed.w": (dp, d),
            "embed.b": (d,),
            "cls.table": (self.num_classes + 1, d),
        }
        for i in range(self.n_blocks):
            shapes[f"blk{i}.w1"] = (d, 2 * d)
            shapes[f"blk{i}.b1"] = (2 * d,)
            shapes[f"blk{i}.w2"] = (2 * d, d)
            shapes[f"blk{i}.b2"] = (d,)
        shapes["head.w"] = (d, dp)
        shapes["head.b"] = (dp,)
        return shapes

    def _zero_params(self) -> ParamSet:
        return ParamSet({k: np.zeros(s) for k, s in self._segment_shapes().items()})

    def init_params(self, rng: np.random.Generator) -> None:
        """Scaled-normal weights, zero biases, zero output head."""
        segs: dict[str, np.ndarray] = {}
        for name, shape in self._segment_shapes().items():
            if name.startswith("head.") or name.endswith(".b") or name.endswith(("b1", "b2")):
                segs[name] = np.zeros(shape)
            elif name == "cls.table":
                segs[name] = 0.1 * rng.standard_normal(shape)
            else:
                segs[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        self.params = ParamSet(segs)

    def arch(self) -> dict[str, int]:
        return {
            "num_classes": self.num_classes, "channels": self.channels,
            "height": self.height, "width": self.width,
            "n_timesteps": self.n_timesteps, "d_model": self.d_model,
            "n_blocks": self.n_blocks, "patch": self.patch,
        }

    @staticmethod
    def from_arch(arch: dict, params: ParamSet | None = None) -> "DenoiserModel":
        return DenoiserModel(**{k: int(v) for k, v in arch.items()}, params=params)

    def lift(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return _lift_params(self.params, requires_grad)

    def reset_counters(self) -> None:
        self.calls = 0
        self.batches = 0

    # forward ------------------------------------------------------------------

    def forward_batch(self, xs, ns, cs, leaves: dict[str, Tensor] | None = None) -> Tensor:
        """Batched epsilon prediction. `ns` is an int array (B,), `cs` a list of
        class ids or None. Pass lifted leaves to track gradients."""
        if leaves is None:
            leaves = self.lift(requires_grad=False)
        x = _as_batch_tensor(xs, (self.channels, self.height, self.width))
        b = x.shape[0]
        ns = np.asarray(ns, dtype=np.int64)
        if ns.shape != (b,):
            raise StructuralError(f"timestep array shape {ns.shape} != ({b},)")
        if ns.size and (ns.min() < 0 or ns.max() > self.n_timesteps):
            raise ContractError(f"timestep outside [0, {self.n_timesteps}]")
        self.calls += b
        self.batches += 1

        p = _patchify(x, self.patch)
        n_patches = (self.height // self.patch) * (self.width // self.patch)
        h = tape.add(tape.matmul(p, leaves["embed.w"]), leaves["embed.b"])

        t_emb = tape.take_rows(self._time, ns)
        c_emb = tape.take_rows(leaves["cls.table"], token_rows(cs, self.num_classes))
        cond = tape.add(t_emb, c_emb)                                  # (B, d)
        cond = tape.reshape(cond, (b, 1, self.d_model))
        cond = tape.broadcast_to(cond, (b, n_patches, self.d_model))
        cond = tape.reshape(cond, (b * n_patches, self.d_model))
        h = tape.add(h, cond)

        for i in range(self.n_blocks):
            z = tape.tanh(tape.add(tape.matmul(h, leaves[f"blk{i}.w1"]), leaves[f"blk{i}.b1"]))
            z = tape.add(tape.matmul(z, leaves[f"blk{i}.w2"]), leaves[f"blk{i}.b2"])
            h = tape.add(h, z)

        out = tape.add(tape.matmul(h, leaves["head.w"]), leaves["head.b"])
        return _unpatchify(out, b, self.channels, self.height, self.width, self.patch)

    def predict_eps_batch(self, xs: np.ndarray, ns, cs) -> np.ndarray:
        return self.forward_batch(xs, ns, cs).data


def denoise(model: DenoiserModel, x, n: int, c, leaves: dict[str, Tensor] | None = None) -> Tensor:
    """Single-grid epsilon prediction; differentiable when leaves track grads."""
    if isinstance(x, Tensor):
        xs = tape.reshape(x, (1,) + x.shape)
    else:
        xs = np.asarray(x, dtype=np.float64)[None]
    out = model.forward_batch(xs, np.array([n]), [c], leaves)
    return tape.reshape(out, out.shape[1:])


class FeatureNet:
    """Frozen random feature extractor with K tap layers.

    Stage 0 embeds non-overlapping patches (a strided convolution written as
    patch extraction + matmul); stage 1 groups 2x2 patch neighborhoods when
    the grid allows; later stages are dense. Every tap is mean-pooled to a
    fixed-size vector. Parameters are drawn once from a seed and never
    updated by any optimizer.
    """

    def __init__(self, channels: int, height: int, width: int, k_taps: int = 3,
                 dim: int = 32, patch: int = 4, params: ParamSet | None = None):
        if k_taps < 1:
            raise ConfigError(f"need at least one tap, got {k_taps}")
        if height % patch or width % patch:
            raise ConfigError(f"patch {patch} must divide grid {height}x{width}")
        self.channels = channels
        self.height = height
        self.width = width
        self.k_taps = k_taps
        self.dim = dim
        self.patch = patch
        self.hn = height // patch
        self.wn = width // patch
        self.can_group = self.hn % 2 == 0 and self.wn % 2 == 0 and self.hn >= 2 and self.wn >= 2
        self.params = params if params is not None else ParamSet(
            {k: np.zeros(s) for k, s in self._segment_shapes().items()})

    def _segment_shapes(self) -> dict[str, tuple[int, ...]]:
        dp = self.channels * self.patch * self.patch
        shapes: dict[str, tuple[int, ...]] = {"s0.w": (dp, self.dim), "s0.b": (self.dim,)}
        for k in range(1, self.k_taps):
            fan_in = 4 * self.dim if (k == 1 and self.can_group) else self.dim
            shapes[f"s{k}.w"] = (fan_in, self.dim)
            shapes[f"s{k}.b"] = (self.dim,)
        return shapes

    def init_params(self, rng: np.random.Generator) -> None:
        segs = {}
        for name, shape in self._segment_shapes().items():
            if name.endswith(".b"):
                segs[name] = 0.1 * rng.standard_normal(shape)
            else:
                segs[name] = rng.standard_normal(shape) * (1.5 / np.sqrt(shape[0]))
        self.params = ParamSet(segs)

    def lift(self) -> dict[str, Tensor]:
        # frozen: leaves never require grad
        return _lift_params(self.params, requires_grad=False)

    def features_batch(self, xs, leaves: dict[str, Tensor] | None = None) -> list[Tensor]:
        """K feature vectors of shape (B, dim) per tap, deterministic."""
        if leaves is None:
            leaves = self.lift()
        x = _as_batch_tensor(xs, (self.channels, self.height, self.width))
        b = x.shape[0]
        taps: list[Tensor] = []

        p = _patchify(x, self.patch)                                     # (B*P, dp)
        z = tape.tanh(tape.add(tape.matmul(p, leaves["s0.w"]), leaves["s0.b"]))
        n_patches = self.hn * self.wn
        z_grid = tape.reshape(z, (b, n_patches, self.dim))
        taps.append(tape.reduce_mean(z_grid, axis=1))

        for k in range(1, self.k_taps):
            if k == 1 and self.can_group:
                g = tape.reshape(z_grid, (b, self.hn // 2, 2, self.wn // 2, 2, self.dim))
                g = tape.transpose(g, (0, 1, 3, 2, 4, 5))
                n2 = (self.hn // 2) * (self.wn // 2)
                g = tape.reshape(g, (b * n2, 4 * self.dim))
                z2 = tape.tanh(tape.add(tape.matmul(g, leaves["s1.w"]), leaves["s1.b"]))
                z2 = tape.reshape(z2, (b, n2, self.dim))
                taps.append(tape.reduce_mean(z2, axis=1))
            else:
                prev = taps[-1]
                v = tape.tanh(tape.add(tape.matmul(prev, leaves[f"s{k}.w"]), leaves[f"s{k}.b"]))
                taps.append(v)
        return taps

    def embed(self, grids: np.ndarray) -> np.ndarray:
        """Final-tap embedding used as the frozen evaluation feature space."""
        return self.features_batch(np.asarray(grids, dtype=np.float64))[-1].data


def features(fnet: FeatureNet, x) -> list[Tensor]:
    """Taps for a single grid: K vectors of shape (dim,)."""
    xs = np.asarray(x, dtype=np.float64)[None] if not isinstance(x, Tensor) else \
        tape.reshape(x, (1,) + x.shape)
    return [tape.reshape(t, (t.shape[1],)) for t in fnet.features_batch(xs)]


class DiscHeadSet:
    """Per-tap discriminator heads: affine -> softplus -> affine to a scalar,
    plus a class projection applied to the hidden representation.

    Softplus keeps the head smooth, so the gradient with respect to the head
    input exists everywhere and can itself be written in primal ops (see
    `head_input_grad`), making its squared norm differentiable in the head
    parameters without double backpropagation.
    """

    def __init__(self, k_heads: int, feat_dim: int, hidden: int, num_classes: int,
                 params: ParamSet | None = None):
        self.k_heads = k_heads
        self.feat_dim = feat_dim
        self.hidden = hidden
        self.num_classes = num_classes
        self.params = params if params is not None else ParamSet(
            {k: np.zeros(s) for k, s in self._segment_shapes().items()})

    def _segment_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for k in range(self.k_heads):
            shapes[f"h{k}.w1"] = (self.feat_dim, self.hidden)
            shapes[f"h{k}.b1"] = (self.hidden,)
            shapes[f"h{k}.w2"] = (self.hidden, 1)
            shapes[f"h{k}.b2"] = (1,)
            shapes[f"h{k}.proj"] = (self.num_classes + 1, self.hidden)
        return shapes

    def init_params(self, rng: np.random.Generator) -> None:
        """Zero output layer and zero projections: every head starts at score 0."""
        segs = {}
        for name, shape in self._segment_shapes().items():
            if name.endswith(".w1"):
                segs[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
            else:
                segs[name] = np.zeros(shape)
        self.params = ParamSet(segs)

    def lift(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return _lift_params(self.params, requires_grad)

    def _check_k(self, k: int) -> None:
        if not (0 <= k < self.k_heads):
            raise ContractError(f"head index {k} outside [0, {self.k_heads})")


def disc_score_batch(heads: DiscHeadSet, h: Tensor, k: int, cs,
                     leaves: dict[str, Tensor] | None = None) -> Tensor:
    """Scores (B,) of head k on feature batch h (B, dim), conditioned on cs."""
    heads._check_k(k)
    if leaves is None:
        leaves = heads.lift()
    h = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float64))
    b = h.shape[0]
    z = tape.softplus(tape.add(tape.matmul(h, leaves[f"h{k}.w1"]), leaves[f"h{k}.b1"]))
    base = tape.add(tape.reshape(tape.matmul(z, leaves[f"h{k}.w2"]), (b,)), leaves[f"h{k}.b2"])
    pvec = tape.take_rows(leaves[f"h{k}.proj"], token_rows(cs, heads.num_classes))
    cond = tape.reduce_sum(tape.mul(z, pvec), axis=1)
    return tape.add(base, cond)


def disc_score(heads: DiscHeadSet, h_k, k: int, c,
               leaves: dict[str, Tensor] | None = None) -> Tensor:
    """Scalar score for one feature vector."""
    h = h_k if isinstance(h_k, Tensor) else Tensor(np.asarray(h_k, dtype=np.float64))
    hb = tape.reshape(h, (1, h.shape[0]))
    return tape.reshape(disc_score_batch(heads, hb, k, [c], leaves), ())


def head_input_grad_batch(heads: DiscHeadSet, h: Tensor, k: int, cs,
                          leaves: dict[str, Tensor] | None = None) -> Tensor:
    """Analytic d(score)/d(h) for head k, written in primal ops:
    (sigmoid(h W1 + b1) * (w2 + proj_c)) W1^T, shape (B, dim)."""
    heads._check_k(k)
    if leaves is None:
        leaves = heads.lift()
    h = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float64))
    b = h.shape[0]
    s = tape.sigmoid(tape.add(tape.matmul(h, leaves[f"h{k}.w1"]), leaves[f"h{k}.b1"]))
    w2_row = tape.reshape(leaves[f"h{k}.w2"], (1, heads.hidden))
    pvec = tape.take_rows(leaves[f"h{k}.proj"], token_rows(cs, heads.num_classes))
    gate = tape.mul(s, tape.add(tape.broadcast_to(w2_row, (b, heads.hidden)), pvec))
    return tape.matmul(gate, tape.transpose(leaves[f"h{k}.w1"], (1, 0)))


def head_input_grad(heads: DiscHeadSet, h_k, k: int, c,
                    leaves: dict[str, Tensor] | None = None) -> Tensor:
    h = h_k if isinstance(h_k, Tensor) else Tensor(np.asarray(h_k, dtype=np.float64))
    hb = tape.reshape(h, (1, h.shape[0]))
    out = head_input_grad_batch(heads, hb, k, [c], leaves)
    return tape.reshape(out, (out.shape[1],))
