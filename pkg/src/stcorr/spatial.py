"""Contrastive spatial pretraining: InfoNCE against a FIFO queue of momentum keys."""
from __future__ import annotations


import numpy as np

from . import tensor as T
from .data import AugmentationPolicy, augment, draw_augmentation, rgb_to_lab, sprite_image, N_TEXTURE_CLASSES
from .encoder import Encoder, momentum_update
from .optim import Adam
from .tensor import Tensor

DEFAULT_TAU_C = 0.07


class SpatialError(ValueError):
    pass


class NegativeQueue:
    """Fixed-capacity FIFO of detached unit-norm keys."""

    def __init__(self, capacity: int = 512, dim: int = 32):
        if capacity < 0:
            raise SpatialError("queue capacity must be non-negative")
        self.capacity = capacity
        self.dim = dim
        self._buf = np.zeros((capacity, dim))
        self._count = 0
        self._cursor = 0

    def __len__(self) -> int:
        return self._count

    def entries(self) -> np.ndarray:
        """Stored keys, oldest first."""
        if self._count < self.capacity:
            return self._buf[:self._count].copy()
        return np.concatenate([self._buf[self._cursor:], self._buf[:self._cursor]])

    def enqueue(self, keys) -> None:
        keys = np.atleast_2d(np.asarray(keys.data if isinstance(keys, Tensor) else keys, dtype=np.float64))
        if keys.shape[1] != self.dim:
            raise SpatialError(f"key dim {keys.shape[1]} != queue dim {self.dim}")
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise SpatialError("queue keys must be unit-norm")
        for k in keys:
            if self.capacity == 0:
                return
            self._buf[self._cursor] = k
            self._cursor = (self._cursor + 1) % self.capacity
            self._count = min(self._count + 1, self.capacity)

    def state(self) -> dict[str, np.ndarray]:
        return {"queue.keys": self.entries()}


def _check_nonzero(name: str, x: np.ndarray) -> None:
    if np.any(np.linalg.norm(np.atleast_2d(x), axis=-1) == 0):
        raise SpatialError(f"{name} has a zero-norm vector")


def info_nce_loss(q, k_pos, negatives, tau_c: float = DEFAULT_TAU_C) -> Tensor:
    """-log softmax of the positive logit among [q.k+, q.k-_1 .. q.k-_K] / tau_c.

    ``q`` and ``k_pos`` are ``(d,)`` or batched ``(B, d)``; ``negatives`` is
    ``(K, d)`` (K may be 0) and is always detached. The batched form returns
    the mean over the batch.
    """
    if not tau_c > 0:
        raise SpatialError(f"tau_c must be positive, got {tau_c}")
    q, k_pos = T.as_tensor(q), T.as_tensor(k_pos)
    neg = np.asarray(negatives.data if isinstance(negatives, Tensor) else negatives, dtype=np.float64)
    single = q.ndim == 1
    if single:
        q, k_pos = T.reshape(q, (1, -1)), T.reshape(k_pos, (1, -1))
    d = q.shape[1]
    neg = neg.reshape(-1, d) if neg.size else np.zeros((0, d))
    if k_pos.shape != q.shape:
        raise T.ShapeError(f"info_nce: q {q.shape} vs k+ {k_pos.shape}")
    _check_nonzero("q", q.data)
    _check_nonzero("k+", k_pos.data)
    if len(neg):
        _check_nonzero("negatives", neg)
    pos = T.sum_(T.mul(q, k_pos), axis=1, keepdims=True)          # (B, 1)
    logits = pos
    if len(neg):
        logits = T.concat([pos, T.matmul(q, Tensor(neg.T))], axis=1)
    logits = T.mul(logits, 1.0 / tau_c)
    per = T.sub(T.logsumexp(logits), T.reshape(logits[:, 0:1], (q.shape[0],)))
    return T.mean(per)


class ProjectionHead:
    """Two-layer MLP (linear-ReLU-linear) on the pooled top-level feature."""

    def __init__(self, in_dim: int, hidden: int = 64, out_dim: int = 32, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        if params is None:
            rng = np.random.default_rng(seed + 7919)
            b1, b2 = np.sqrt(6.0 / in_dim), np.sqrt(3.0 / hidden)
            params = {
                "head.w1": Tensor(rng.uniform(-b1, b1, (in_dim, hidden)), requires_grad=True),
                "head.b1": Tensor(np.zeros(hidden), requires_grad=True),
                "head.w2": Tensor(rng.uniform(-b2, b2, (hidden, out_dim)), requires_grad=True),
            }
        self.params = params
        self.out_dim = params["head.w2"].shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        h = T.relu(T.add(T.matmul(x, p["head.w1"]), p["head.b1"]))
        return T.matmul(h, p["head.w2"])


class SpatialModel:
    """Encoder plus projection head; ``embed`` gives unit-norm instance embeddings."""

    def __init__(self, encoder: Encoder, head: ProjectionHead | None = None):
        self.encoder = encoder
        self.head = head or ProjectionHead(encoder.config.level_dims[-1], seed=encoder.config.seed)

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.encoder.params, **self.head.params}

    def embed(self, images) -> Tensor:
        pyr = self.encoder.forward(images, normalize=False)
        top = pyr.levels[-1]
        pooled = T.mean(top, axis=(1, 2))
        return T.l2_normalize(self.head(pooled))

    def momentum_copy(self) -> "SpatialModel":
        enc = self.encoder.copy()
        head = ProjectionHead(0, params={k: Tensor(v.data.copy(), requires_grad=True)
                                         for k, v in self.head.params.items()})
        return SpatialModel(enc, head)


def sprite_corpus(n_images: int, size: int, seed: int = 0, n_classes: int = N_TEXTURE_CLASSES) -> np.ndarray:
    """RGB images of textured sprites; image i uses texture class i % n_classes."""
    rng = np.random.default_rng(seed)
    return np.stack([sprite_image(i % n_classes, size, rng) for i in range(n_images)])


def augment_pair(images: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator):
    """Two independent augmentations of every image, returned as normalized Lab."""
    views = []
    for _ in range(2):
        out = [augment(img, policy, draw_augmentation(policy, img.shape, rng)) for img in images]
        views.append(rgb_to_lab(np.stack(out), normalize=True))
    return views[0], views[1]


def spatial_train_step(images, student: SpatialModel, key_model: SpatialModel, queue: NegativeQueue,
                       policy: AugmentationPolicy, optimizer: Adam, rng: np.random.Generator,
                       momentum: float = 0.99, tau_c: float = DEFAULT_TAU_C,
                       views: tuple[np.ndarray, np.ndarray] | None = None) -> float:
    """One MoCo-style step; returns the batch-mean InfoNCE loss.

    Keys enter the queue after the loss is computed, so a batch never sees
    its own keys as negatives.
    """
    if len(images) < 1:
        raise SpatialError("batch must hold at least one image")
    va, vb = views if views is not None else augment_pair(np.asarray(images), policy, rng)
    q = student.embed(va)
    with T.no_grad_enabled():
        k = key_model.embed(vb).data
    loss = info_nce_loss(q, Tensor(k), queue.entries(), tau_c)
    optimizer.zero_grad()
    T.backpropagate(loss)
    optimizer.step()
    momentum_update(key_model.params, student.params, momentum)
    queue.enqueue(k)
    return loss.item()
