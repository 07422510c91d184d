"""Cross-modal fusion routed through a small set of latent nodes.

Each modality's N feature rows are summarized into n latent rows through a
row-stochastic affinity, the 2n latent rows exchange messages over a dense
latent graph, and the refined latents are broadcast back to the N rows with a
residual. Every step touches the N rows only through N x n or N x C
products, so cost is linear in N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .voxel import LinearParams

DENSE_ORACLE_MAX_N = 256


@dataclass(frozen=True)
class Mlp:
    """fc1, ReLU, fc2, optionally followed by a sigmoid."""

    fc1: LinearParams
    fc2: LinearParams
    gate: bool = False

    def __call__(self, x: Tensor) -> Tensor:
        y = self.fc2(ad.relu(self.fc1(x)))
        return ad.sigmoid(y) if self.gate else y

    @classmethod
    def init(cls, rng, c: int, hidden: int | None = None, dtype=np.float64, gate: bool = False):
        hidden = c if hidden is None else hidden
        return cls(LinearParams.init(rng, c, hidden, dtype), LinearParams.init(rng, hidden, c, dtype), gate)

    @classmethod
    def identity(cls, c: int, dtype=np.float64):
        """Exact identity map: relu(x) - relu(-x) with hidden width 2C."""
        eye = np.eye(c)
        fc1 = LinearParams(Tensor(np.concatenate([eye, -eye], axis=1), dtype=dtype), Tensor(np.zeros(2 * c), dtype=dtype))
        fc2 = LinearParams(Tensor(np.concatenate([eye, -eye], axis=0), dtype=dtype), Tensor(np.zeros(c), dtype=dtype))
        return cls(fc1, fc2, gate=False)


@dataclass(frozen=True)
class EcmiParams:
    """Parameters of one fusion stage.

    ``w_v`` is None when the value projection is shared between modalities.
    ``theta_dec_i``/``theta_dec_v`` set to None reuse the encode affinities.
    ``atten_input="shared"`` feeds ``F_I^s + V^s`` to both gates;
    ``"modality"`` feeds each gate its own modality.
    """

    siamese: Mlp
    theta_i: Tensor
    theta_v: Tensor
    w: Tensor
    sigma: Tensor
    theta_dec_i: Tensor | None
    theta_dec_v: Tensor | None
    atten_i: Mlp
    atten_v: Mlp
    fuse: LinearParams
    w_v: Tensor | None = None
    fuse_norm: bool = True
    atten_input: str = "shared"
    latent_order: str = "interleave"

    @property
    def n_latent(self) -> int:
        return self.theta_i.shape[0]

    @property
    def channels(self) -> int:
        return self.theta_i.shape[1]

    @property
    def value_proj_v(self) -> Tensor:
        return self.w if self.w_v is None else self.w_v

    @property
    def dec_i(self) -> Tensor:
        return self.theta_i if self.theta_dec_i is None else self.theta_dec_i

    @property
    def dec_v(self) -> Tensor:
        return self.theta_v if self.theta_dec_v is None else self.theta_dec_v

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        c: int,
        n: int,
        dtype=np.float64,
        *,
        share_w: bool = True,
        tie_decode: bool = False,
        **flags,
    ) -> "EcmiParams":
        def mat(rows, cols, gain=1.0):
            return Tensor(rng.normal(0.0, gain / math.sqrt(cols), size=(rows, cols)), dtype=dtype)

        return cls(
            siamese=Mlp.init(rng, c, dtype=dtype),
            theta_i=mat(n, c),
            theta_v=mat(n, c),
            w=mat(c, c),
            sigma=mat(c, c),
            theta_dec_i=None if tie_decode else mat(n, c),
            theta_dec_v=None if tie_decode else mat(n, c),
            atten_i=Mlp.init(rng, c, dtype=dtype, gate=True),
            atten_v=Mlp.init(rng, c, dtype=dtype, gate=True),
            fuse=LinearParams.init(rng, c, c, dtype),
            w_v=None if share_w else mat(c, c),
            **flags,
        )


@dataclass(frozen=True)
class QkvParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, dtype=np.float64) -> "QkvParams":
        mats = [Tensor(rng.normal(0.0, 1.0 / math.sqrt(c), size=(c, c)), dtype=dtype) for _ in range(3)]
        return cls(*mats)


def _pair(name: str, a: Tensor, b: Tensor) -> None:
    if a.data.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"{name}: expected two equal N x C tensors, got {a.shape} and {b.shape}")


def siamese_encode(f_img: Tensor, v_lidar: Tensor, mlp: Mlp) -> tuple[Tensor, Tensor]:
    """Apply the one shared MLP to both modalities."""
    _pair("siamese_encode", f_img, v_lidar)
    return mlp(f_img), mlp(v_lidar)


def affinity(x: Tensor, theta: Tensor) -> Tensor:
    """Row-stochastic N x n affinity: softmax over k of ``theta_k . x_i``."""
    if x.shape[1] != theta.shape[1]:
        raise ShapeError(f"affinity: feature width {x.shape[1]} != theta width {theta.shape[1]}")
    return ad.softmax(ad.matmul(x, ad.transpose(theta)), axis=1)


def encode_to_latent(xs: Tensor, theta: Tensor, w: Tensor) -> Tensor:
    """``z_k = sum_i psi_ik W^T x_i`` evaluated as ``(Psi^T X) W``."""
    psi = affinity(xs, theta)
    return ad.matmul(ad.matmul(ad.transpose(psi), xs), w)


def latent_graph_propagate(zc: Tensor, sigma: Tensor) -> Tensor:
    """One round of message passing over the dense 2n-node latent graph."""
    q = ad.matmul(zc, sigma)
    scores = ad.scale(ad.matmul(q, ad.transpose(q)), 1.0 / math.sqrt(zc.shape[1]))
    return ad.matmul(ad.softmax(scores, axis=1), zc)


def decode_from_latent(xs: Tensor, z_ref: Tensor, theta_dec: Tensor) -> Tensor:
    """``relu(Psi_dec Z) + X`` with ``Psi_dec = affinity(X, theta_dec)``."""
    msg = ad.matmul(affinity(xs, theta_dec), z_ref)
    return ad.add(ad.relu(msg), xs)


def join_latents(z_i: Tensor, z_v: Tensor, order: str = "interleave") -> Tensor:
    n = z_i.shape[0]
    both = ad.concat_rows([z_i, z_v])
    if order == "block":
        return both
    if order != "interleave":
        raise ValueError(f"unknown latent order {order!r}")
    perm = np.stack([np.arange(n), np.arange(n) + n], axis=1).reshape(-1)
    return ad.gather_rows(both, perm)


def split_latents(zc: Tensor, order: str = "interleave") -> tuple[Tensor, Tensor]:
    if zc.shape[0] % 2:
        raise ShapeError(f"latent block needs an even row count, got {zc.shape[0]}")
    n = zc.shape[0] // 2
    if order == "block":
        return ad.gather_rows(zc, np.arange(n)), ad.gather_rows(zc, np.arange(n, 2 * n))
    return ad.gather_rows(zc, np.arange(0, 2 * n, 2)), ad.gather_rows(zc, np.arange(1, 2 * n, 2))


def ecmi(fs: Tensor, vs: Tensor, params: EcmiParams) -> tuple[Tensor, Tensor]:
    """Encode both modalities, mix the latents, decode with residual."""
    _pair("ecmi", fs, vs)
    n, N = params.n_latent, fs.shape[0]
    if n < 1 or 4 * n > N:
        raise ContractError(f"latent count n={n} needs 1 <= n <= N/4 (N={N})")
    z_i = encode_to_latent(fs, params.theta_i, params.w)
    z_v = encode_to_latent(vs, params.theta_v, params.value_proj_v)
    zc = latent_graph_propagate(join_latents(z_i, z_v, params.latent_order), params.sigma)
    zt_i, zt_v = split_latents(zc, params.latent_order)
    return decode_from_latent(fs, zt_i, params.dec_i), decode_from_latent(vs, zt_v, params.dec_v)


def fuse_head(fs: Tensor, vs: Tensor, ft: Tensor, vt: Tensor, params: EcmiParams) -> Tensor:
    """Gate the two enhanced streams, sum them, then linear + norm + ReLU."""
    for name, t in (("vs", vs), ("ft", ft), ("vt", vt)):
        _pair(f"fuse_head ({name})", fs, t)
    if params.atten_input == "shared":
        joint = ad.add(fs, vs)
        g_i, g_v = params.atten_i(joint), params.atten_v(joint)
    elif params.atten_input == "modality":
        g_i, g_v = params.atten_i(fs), params.atten_v(vs)
    else:
        raise ValueError(f"unknown atten_input {params.atten_input!r}")
    mixed = ad.add(ad.mul(g_i, ft), ad.mul(g_v, vt))
    y = params.fuse(mixed)
    if params.fuse_norm:
        y = ad.layer_norm(y)
    return ad.relu(y)


def latent_fusion(f_img: Tensor, v_lidar: Tensor, params: EcmiParams) -> Tensor:
    """Siamese encoding, interaction and fusion head for one stage."""
    fs, vs = siamese_encode(f_img, v_lidar, params.siamese)
    ft, vt = ecmi(fs, vs, params)
    return fuse_head(fs, vs, ft, vt, params)


def qkv_cross_attention(f_img: Tensor, v_lidar: Tensor, params: QkvParams, chunk_rows: int | None = None) -> Tensor:
    """Single-head scaled dot-product attention; queries from LiDAR rows.

    ``chunk_rows`` bounds memory by processing query rows in blocks; the
    result is the same computation.
    """
    _pair("qkv_cross_attention", f_img, v_lidar)
    q = ad.matmul(v_lidar, params.wq)
    k_t = ad.transpose(ad.matmul(f_img, params.wk))
    val = ad.matmul(f_img, params.wv)
    inv = 1.0 / math.sqrt(f_img.shape[1])
    n = q.shape[0]
    if chunk_rows is None or chunk_rows >= n:
        return ad.matmul(ad.softmax(ad.scale(ad.matmul(q, k_t), inv), axis=1), val)
    blocks = []
    for start in range(0, n, chunk_rows):
        qb = ad.gather_rows(q, np.arange(start, min(start + chunk_rows, n)))
        blocks.append(ad.matmul(ad.softmax(ad.scale(ad.matmul(qb, k_t), inv), axis=1), val))
    return ad.concat_rows(blocks)


# ---------------------------------------------------------------------------
# Dense reference


def _np_softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def dense_oracle_ecmi(fs: Tensor, vs: Tensor, params: EcmiParams) -> tuple[Tensor, Tensor]:
    """ecmi evaluated through the explicit 2N x 2N cross-modal operator.

    Builds ``M[a, b] = Psi_dec^a A[a, b] Psi^b^T`` for modalities a, b and
    applies it to the value-projected inputs, so the N x N pairwise
    interactions are materialized instead of factored through the latents.
    """
    _pair("dense_oracle_ecmi", fs, vs)
    N = fs.shape[0]
    if N > DENSE_ORACLE_MAX_N:
        raise ContractError(f"dense oracle limited to N <= {DENSE_ORACLE_MAX_N}, got {N}")
    f64 = lambda t: np.asarray(t.data, dtype=np.float64)  # noqa: E731
    x = {"i": f64(fs), "v": f64(vs)}
    w = {"i": f64(params.w), "v": f64(params.value_proj_v)}
    theta = {"i": f64(params.theta_i), "v": f64(params.theta_v)}
    theta_dec = {"i": f64(params.dec_i), "v": f64(params.dec_v)}
    n, c = theta["i"].shape

    psi = {m: _np_softmax_rows(np.einsum("ic,kc->ik", x[m], theta[m])) for m in x}
    psi_dec = {m: _np_softmax_rows(np.einsum("ic,kc->ik", x[m], theta_dec[m])) for m in x}
    values = {m: x[m] @ w[m] for m in x}
    z = {m: psi[m].T @ values[m] for m in x}

    # latent adjacency, pairwise
    zc = np.empty((2 * n, c))
    zc[0::2], zc[1::2] = z["i"], z["v"]
    proj = zc @ f64(params.sigma)
    scores = np.array([[proj[a] @ proj[b] for b in range(2 * n)] for a in range(2 * n)]) / math.sqrt(c)
    adj = _np_softmax_rows(scores)
    rows = {"i": slice(0, None, 2), "v": slice(1, None, 2)}

    op = np.block([[psi_dec[a] @ adj[rows[a], rows[b]] @ psi[b].T for b in "iv"] for a in "iv"])
    msg = op @ np.concatenate([values["i"], values["v"]], axis=0)
    out = np.maximum(msg, 0.0) + np.concatenate([x["i"], x["v"]], axis=0)
    dtype = fs.dtype
    return Tensor(out[:N], dtype=dtype), Tensor(out[N:], dtype=dtype)
