"""The place descriptor network: NDT cells in, unit-norm global descriptor out.

Pipeline per submap (``k`` cells):

    T-Net(means) -> T                       (identity when use_tnet is off)
    (T mu, T C T^T) packed as 9 features    (mean + upper triangle)
    head stack    9 -> d_model
    3 x encoder   self-attention + FFN, post-norm residuals
    concat(head output, encoder output) -> bottom stack -> vlad_in
    NetVLAD (soft assignment, residual sums, intra + global L2)
    linear projection -> out_dim, L2 normalized

Nothing depends on cell order except through symmetric reductions (max in the
T-Net, sums in NetVLAD), so descriptors are invariant to permuting cells.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .ndt import TRIU_COLS, TRIU_ROWS, NdtMap
from .nn import BatchNorm, Dropout, LayerNorm, Linear, LinearStack, Module, assign_dropout_ids


class CardinalityError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    d_ff: int = 1024
    heads: int = 4
    encoders: int = 3
    dropout: float = 0.1
    vlad_clusters: int = 64
    vlad_in: int = 1024
    out_dim: int = 256
    head_widths: tuple | None = None
    tnet_point_widths: tuple = (64, 128, 1024)
    tnet_fc_widths: tuple = (512, 256)
    use_points_only: bool = False
    use_cov_only: bool = False
    use_tnet: bool = True
    k: int | None = None
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.use_points_only and self.use_cov_only:
            raise ValueError("use_points_only and use_cov_only are mutually exclusive")
        if self.head_widths is not None:
            object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
            if self.head_widths[-1] != self.d_model:
                raise ValueError("the last head width must equal d_model")
        for name in ("tnet_point_widths", "tnet_fc_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))

    @property
    def head_stack(self) -> tuple:
        """Head widths; unset means two layers of d_model (so replace(d_model=...) stays consistent)."""
        return self.head_widths if self.head_widths is not None else (self.d_model, self.d_model)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class TNet(Module):
    """PointNet-style input transform: shared MLP, max-pool, FC, 3x3 output."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.points = LinearStack(3, cfg.tnet_point_widths, rng, cfg.bn_momentum)
        self.fc = LinearStack(cfg.tnet_point_widths[-1], cfg.tnet_fc_widths, rng, cfg.bn_momentum)
        self.out = Linear(cfg.tnet_fc_widths[-1], 9, rng)
        # zero weights + identity bias: the initial transform is exactly I
        self.out.weight.data[...] = 0.0
        self.out.bias.data[...] = np.eye(3).reshape(-1)

    def forward(self, means: Tensor) -> Tensor:
        b = means.shape[0]
        h = self.points(means)
        pooled = h.max(axis=1)
        t = self.out(self.fc(pooled))
        return t.reshape(b, 3, 3)


def apply_transform(means: Tensor, covs: Tensor, T: Tensor | None, cfg: ModelConfig) -> Tensor:
    """Per-cell features (T mu, upper(T C T^T)) of shape (B, k, 9), with ablation masking."""
    if T is not None:
        means = means @ T.swapaxes(-1, -2)
        T4 = T.reshape(T.shape[0], 1, 3, 3)
        covs = T4 @ covs @ T4.swapaxes(-1, -2)
        covs = (covs + covs.swapaxes(-1, -2)) * 0.5
    upper = covs[:, :, TRIU_ROWS, TRIU_COLS]
    if cfg.use_points_only:
        upper = Tensor(np.zeros(upper.shape, dtype=upper.dtype))
    if cfg.use_cov_only:
        means = Tensor(np.zeros(means.shape, dtype=means.dtype))
    return ad.concat([means, upper], axis=-1)


class SelfAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.q = Linear(d_model, d_model, rng)
        # a key bias only shifts each query's logits uniformly; softmax ignores it
        self.k = Linear(d_model, d_model, rng, bias=False)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        dk = d // self.heads
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
        weights = ad.softmax(scores, axis=-1)
        self.last_weights = weights.data
        heads = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.o(heads)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.attn = SelfAttention(cfg.d_model, cfg.heads, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ff1 = Linear(cfg.d_model, cfg.d_ff, rng)
        self.ff2 = Linear(cfg.d_ff, cfg.d_model, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.drop_attn = Dropout(cfg.dropout)
        self.drop_ff_inner = Dropout(cfg.dropout)
        self.drop_ff = Dropout(cfg.dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.drop_attn(self.attn(x)))
        ff = self.ff2(self.drop_ff_inner(ad.relu(self.ff1(x))))
        return self.norm2(x + self.drop_ff(ff))


class NetVLAD(Module):
    """Soft-assignment VLAD over a set of local features (B, k, D) -> (B, K*D)."""

    def __init__(self, dim: int, clusters: int, rng: np.random.Generator):
        super().__init__()
        self.assign = Linear(dim, clusters, rng)
        self.centers = Parameter(rng.uniform(-1.0, 1.0, (clusters, dim)) / math.sqrt(dim))

    def forward(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        a = ad.softmax(self.assign(x), axis=-1)
        # sum_i a_ik (x_i - c_k) = (A^T X)_k - (sum_i a_ik) c_k
        vlad = a.swapaxes(-1, -2) @ x - a.sum(axis=1).reshape(b, -1, 1) * self.centers
        vlad = ad.l2normalize(vlad, axis=-1)
        return ad.l2normalize(vlad.reshape(b, -1), axis=-1)


class PlaceNet(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.tnet = TNet(cfg, rng) if cfg.use_tnet else None
        self.head = LinearStack(9, cfg.head_stack, rng, cfg.bn_momentum)
        self.encoders = [EncoderLayer(cfg, rng) for _ in range(cfg.encoders)]
        self.bottom = LinearStack(2 * cfg.d_model, (cfg.vlad_in, cfg.vlad_in), rng, cfg.bn_momentum)
        self.vlad = NetVLAD(cfg.vlad_in, cfg.vlad_clusters, rng)
        self.proj = Linear(cfg.vlad_in * cfg.vlad_clusters, cfg.out_dim, rng)
        assign_dropout_ids(self, seed)
        self.astype(dtype)

    @property
    def dtype(self):
        return self.proj.weight.dtype

    def transform(self, means: Tensor) -> Tensor | None:
        return self.tnet(means) if self.tnet is not None else None

    def features(self, means: Tensor, covs: Tensor) -> Tensor:
        return apply_transform(means, covs, self.transform(means), self.cfg)

    def encode(self, x: Tensor) -> Tensor:
        for enc in self.encoders:
            x = enc(x)
        return x

    def forward(self, means, covs) -> Tensor:
        """Descriptors (B, out_dim) for batched cells: means (B, k, 3), covs (B, k, 3, 3)."""
        if not isinstance(means, Tensor):
            means = Tensor(np.asarray(means, dtype=self.dtype))
        if not isinstance(covs, Tensor):
            covs = Tensor(np.asarray(covs, dtype=self.dtype))
        if means.ndim != 3 or covs.ndim != 4:
            raise ValueError(f"expected means (B,k,3) and covs (B,k,3,3), got {means.shape} and {covs.shape}")
        if self.cfg.k is not None and means.shape[1] != self.cfg.k:
            raise CardinalityError(f"cardinality mismatch: expected {self.cfg.k} cells, got {means.shape[1]}")
        lifted = self.head(self.features(means, covs))
        context = self.encode(lifted)
        fused = self.bottom(ad.concat([lifted, context], axis=-1))
        return ad.l2normalize(self.proj(self.vlad(fused)), axis=-1)


def stack_maps(maps, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    ks = {len(m) for m in maps}
    if len(ks) != 1:
        raise CardinalityError(f"cardinality mismatch: maps have cell counts {sorted(ks)}")
    means = np.stack([m.means for m in maps]).astype(dtype)
    covs = np.stack([m.covs for m in maps]).astype(dtype)
    return means, covs


def embed(model: PlaceNet, maps, train: bool = False, batch_size: int = 32, workers: int = 1) -> np.ndarray:
    """Descriptors for one NdtMap or a list of them, without recording a graph.

    ``workers > 1`` spreads batches over threads; output order follows input
    order. Training-mode embedding updates BatchNorm buffers, so it stays serial.
    """
    single = isinstance(maps, NdtMap)
    maps = [maps] if single else list(maps)
    chunks = [maps[i : i + batch_size] for i in range(0, len(maps), batch_size)]

    def run(chunk):
        with ad.no_grad():
            means, covs = stack_maps(chunk, model.dtype)
            return model(means, covs).data.astype(np.float64)

    # keep the caller's mode; only force what was asked for
    was_training = model.training
    model.train(train)
    try:
        if workers > 1 and not train and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                out = list(pool.map(run, chunks))
        else:
            out = [run(c) for c in chunks]
    finally:
        model.train(was_training)
    res = np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.out_dim))
    return res[0] if single else res
