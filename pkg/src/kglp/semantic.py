"""Semantic enrichment: per-prompt raw vectors -> learned 24-d node signal.

Raw vectors come from an on-disk store produced offline by a language-model
extraction tool. Each (entity, prompt) pair maps to one vector; the encoder
layer-normalizes each vector, projects it with a prompt-specific affine map,
aggregates across prompts, and squashes through a small sigmoid head. The
result is concatenated with the positional labels to form the layer-0 node
embedding.

Store layout (directory):

    manifest.json   {"model":..., "mode":"mlm"|"clm", "prompts":[...],
                     "dim": D, "dtype": "f32"}
    entities.txt    one entity string per line; line number = entity index
    vectors.bin     magic "TYLREMB1", little-endian, u32 dim, u32 record
                    count, then records of (u32 entity index, u8 prompt
                    index, dim * f32)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

STORE_MAGIC = b"TYLREMB1"
LN_EPS = 1e-5

AGG_SUM = "sum"
AGG_MEAN = "mean"
AGG_CONCAT = "concat"
AGG_TYPE_ONLY = "type-only"
AGGREGATIONS = (AGG_SUM, AGG_MEAN, AGG_CONCAT, AGG_TYPE_ONLY)


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    aspect: str
    template: str  # exactly one "{}" placeholder for the entity label


PROMPTS: tuple[PromptTemplate, ...] = (
    PromptTemplate("p1", "type", "{} is a type of"),
    PromptTemplate("p2", "geographic", "{} is located in"),
    PromptTemplate("p3", "membership", "{} is member of"),
    PromptTemplate("p4", "equivalence", "{} is equivalent to"),
    PromptTemplate("p5", "difference", "{} is different from"),
    PromptTemplate("p6", "similarity", "{} is similar to"),
)

assert len({p.id for p in PROMPTS}) == len(PROMPTS)
assert all(p.template.count("{}") == 1 for p in PROMPTS)

DEFAULT_PROMPT_STRINGS = [p.template for p in PROMPTS]


@dataclass
class StoreManifest:
    model: str
    mode: str  # "mlm" | "clm"
    prompts: list[str]
    dim: int
    dtype: str = "f32"

    def to_json(self) -> str:
        return json.dumps(
            {"model": self.model, "mode": self.mode, "prompts": self.prompts, "dim": self.dim, "dtype": self.dtype},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "StoreManifest":
        d = json.loads(text)
        return cls(model=d["model"], mode=d["mode"], prompts=list(d["prompts"]), dim=int(d["dim"]),
                   dtype=d.get("dtype", "f32"))


class EmbeddingStore:
    """Immutable (entity, prompt) -> raw vector index with miss fallbacks.

    `fallback` is "zero" (default) or "hash"; hash vectors are deterministic
    functions of (seed, key, prompt index) where the key defaults to the
    entity string but can be remapped via `fallback_keys` (used by tests to
    key synthetic semantics to latent entity properties).
    """

    def __init__(
        self,
        manifest: StoreManifest,
        entities: list[str] | None = None,
        vectors: dict[tuple[int, int], np.ndarray] | None = None,
        fallback: str = "zero",
        fallback_seed: int = 0,
        fallback_keys: dict[str, str] | None = None,
    ) -> None:
        self.manifest = manifest
        self.entities = list(entities) if entities else []
        self.entity_index = {name: i for i, name in enumerate(self.entities)}
        self.vectors = dict(vectors) if vectors else {}
        self.fallback = fallback
        self.fallback_seed = fallback_seed
        self.fallback_keys = fallback_keys or {}
        self.miss_count = 0
        self._hash_memo: dict[tuple[str, int], np.ndarray] = {}
        for (ei, pi), vec in self.vectors.items():
            if vec.shape != (manifest.dim,):
                raise DataError(
                    f"stored vector for entity {ei} prompt {pi} has length {vec.shape}, manifest says {manifest.dim}"
                )

    @property
    def dim(self) -> int:
        return self.manifest.dim

    @property
    def num_prompts(self) -> int:
        return len(self.manifest.prompts)

    def add(self, entity: str, prompt_idx: int, vec: np.ndarray) -> None:
        if vec.shape != (self.dim,):
            raise DataError(f"vector length {vec.shape} does not match manifest dim {self.dim}")
        if entity not in self.entity_index:
            self.entity_index[entity] = len(self.entities)
            self.entities.append(entity)
        self.vectors[(self.entity_index[entity], prompt_idx)] = np.asarray(vec, dtype=np.float32)

    def _hash_vector(self, key: str, prompt_idx: int) -> np.ndarray:
        memo = self._hash_memo.get((key, prompt_idx))
        if memo is not None:
            return memo
        digest = hashlib.sha256(f"{self.fallback_seed}|{key}|{prompt_idx}".encode()).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
        vec = rng.standard_normal(self.dim)
        vec.setflags(write=False)
        self._hash_memo[(key, prompt_idx)] = vec
        return vec

    def lookup(self, entity: str, prompt_idx: int) -> np.ndarray:
        """Raw vector for (entity, prompt), as float64.

        Missing keys return the configured fallback and bump the miss
        counter.
        """
        ei = self.entity_index.get(entity)
        if ei is not None:
            vec = self.vectors.get((ei, prompt_idx))
            if vec is not None:
                return vec.astype(np.float64)
        self.miss_count += 1
        if self.fallback == "hash":
            return self._hash_vector(self.fallback_keys.get(entity, entity), prompt_idx)
        return np.zeros(self.dim)

    def coverage(self, entity_names: list[str]) -> float:
        """Fraction of requested (entity, prompt) pairs materialized on disk."""
        want = len(entity_names) * self.num_prompts
        if want == 0:
            return 1.0
        have = sum(
            1
            for name in entity_names
            for p in range(self.num_prompts)
            if self.entity_index.get(name) is not None and (self.entity_index[name], p) in self.vectors
        )
        return have / want

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "manifest.json").write_text(self.manifest.to_json(), encoding="utf-8")
        with open(directory / "entities.txt", "w", encoding="utf-8") as f:
            for name in self.entities:
                f.write(name + "\n")
        records = sorted(self.vectors.items())
        with open(directory / "vectors.bin", "wb") as f:
            f.write(STORE_MAGIC)
            f.write(struct.pack("<II", self.dim, len(records)))
            for (ei, pi), vec in records:
                f.write(struct.pack("<IB", ei, pi))
                f.write(np.asarray(vec, dtype="<f4").tobytes())

    @classmethod
    def load(cls, directory: str | Path, **fallback_opts) -> "EmbeddingStore":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.is_file():
            raise DataError(f"missing manifest: {manifest_path}")
        manifest = StoreManifest.from_json(manifest_path.read_text(encoding="utf-8"))
        entities_path = directory / "entities.txt"
        entities = []
        if entities_path.is_file():
            entities = entities_path.read_text(encoding="utf-8").splitlines()
        vectors: dict[tuple[int, int], np.ndarray] = {}
        bin_path = directory / "vectors.bin"
        if not bin_path.is_file():
            raise DataError(f"missing vector file: {bin_path}")
        raw = bin_path.read_bytes()
        if raw[:8] != STORE_MAGIC:
            raise DataError(f"{bin_path}: bad magic {raw[:8]!r}")
        dim, count = struct.unpack_from("<II", raw, 8)
        if dim != manifest.dim:
            raise DataError(f"{bin_path}: dim {dim} disagrees with manifest dim {manifest.dim}")
        off = 16
        rec_size = 5 + 4 * dim
        if len(raw) != off + count * rec_size:
            raise DataError(f"{bin_path}: truncated ({len(raw)} bytes for {count} records of {rec_size})")
        for _ in range(count):
            ei, pi = struct.unpack_from("<IB", raw, off)
            vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=off + 5).copy()
            vectors[(ei, pi)] = vec
            off += rec_size
        store = cls(manifest, entities, vectors, **fallback_opts)
        return store


def lookup_raw(store: EmbeddingStore, entity: str, prompt_idx: int) -> np.ndarray:
    return store.lookup(entity, prompt_idx)


@dataclass
class SemanticEncoderParams:
    """Learnable parameters of the semantic encoder.

    Per prompt: layer-norm gain/bias over the raw dimension and an affine
    projection to the shared width d_p. The head maps the aggregate to the
    semantic output (dimension 24 in the standard configuration) before the
    sigmoid.
    """

    ln_gain: np.ndarray   # (n_prompts, dim_raw)
    ln_bias: np.ndarray   # (n_prompts, dim_raw)
    W_p: np.ndarray       # (n_prompts, d_p, dim_raw)
    b_p: np.ndarray       # (n_prompts, d_p)
    W_o: np.ndarray       # (sem_dim, d_agg)
    aggregation: str = AGG_SUM

    @property
    def n_prompts(self) -> int:
        return self.W_p.shape[0]

    @property
    def d_p(self) -> int:
        return self.W_p.shape[1]

    @property
    def dim_raw(self) -> int:
        return self.W_p.shape[2]

    @property
    def sem_dim(self) -> int:
        return self.W_o.shape[0]

    @property
    def d_agg(self) -> int:
        return self.W_o.shape[1]


def agg_width(aggregation: str, n_prompts: int, d_p: int) -> int:
    if aggregation == AGG_CONCAT:
        return n_prompts * d_p
    if aggregation in (AGG_SUM, AGG_MEAN, AGG_TYPE_ONLY):
        return d_p
    raise DataError(f"unknown aggregation {aggregation!r}")


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_out, fan_in = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_semantic_params(
    rng: np.random.Generator,
    n_prompts: int,
    dim_raw: int,
    d_p: int = 64,
    sem_dim: int = 24,
    aggregation: str = AGG_SUM,
) -> SemanticEncoderParams:
    return SemanticEncoderParams(
        ln_gain=np.ones((n_prompts, dim_raw)),
        ln_bias=np.zeros((n_prompts, dim_raw)),
        W_p=glorot(rng, (n_prompts, d_p, dim_raw)),
        b_p=np.zeros((n_prompts, d_p)),
        W_o=glorot(rng, (sem_dim, agg_width(aggregation, n_prompts, d_p))),
        aggregation=aggregation,
    )


def layer_norm(z: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """LN over the last axis: zero mean, unit variance, then gain and bias."""
    mu = z.mean(axis=-1, keepdims=True)
    var = ((z - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (z - mu) / np.sqrt(var + LN_EPS)
    return gain * xhat + bias


def project(ln_gain: np.ndarray, ln_bias: np.ndarray, W: np.ndarray, b: np.ndarray, z: np.ndarray) -> np.ndarray:
    """One prompt's projection block: affine map of the layer-normed vector."""
    if z.shape[-1] != W.shape[-1]:
        raise DataError(f"raw vector length {z.shape[-1]} does not match projection input {W.shape[-1]}")
    return layer_norm(z, ln_gain, ln_bias) @ W.T + b


def aggregate(kind: str, vectors: list[np.ndarray]) -> np.ndarray:
    """Combine per-prompt projected vectors (prompt-id order for concat)."""
    if not vectors:
        raise DataError("nothing to aggregate")
    if kind == AGG_SUM:
        return np.sum(vectors, axis=0)
    if kind == AGG_MEAN:
        return np.sum(vectors, axis=0) / len(vectors)
    if kind == AGG_CONCAT:
        widths = {v.shape[-1] for v in vectors}
        if len(widths) != 1:
            raise DataError(f"concat with inconsistent widths {sorted(widths)}")
        return np.concatenate(vectors, axis=-1)
    if kind == AGG_TYPE_ONLY:
        return vectors[0]
    raise DataError(f"unknown aggregation {kind!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class EncodeTrace:
    """Intermediates of a batched encode pass, kept for the backward pass."""

    Z: np.ndarray        # (N, P, dim_raw) raw vectors
    xhat: np.ndarray     # (N, P, dim_raw) normalized cores
    inv_std: np.ndarray  # (N, P, 1)
    Zh: np.ndarray       # (N, P, d_p) projected
    z_agg: np.ndarray    # (N, d_agg)
    relu_agg: np.ndarray  # (N, d_agg)
    h_sem: np.ndarray    # (N, sem_dim)
    active_prompts: list[int] = field(default_factory=list)


def encode_batch(params: SemanticEncoderParams, store: EmbeddingStore, entities: list[str]) -> EncodeTrace:
    """Encode a batch of entities; pure in (params, stored vectors)."""
    if store.dim != params.dim_raw:
        raise DataError(f"store dim {store.dim} does not match encoder raw dim {params.dim_raw}")
    n = len(entities)
    P = params.n_prompts
    active = [0] if params.aggregation == AGG_TYPE_ONLY else list(range(P))
    Z = np.zeros((n, P, params.dim_raw))
    for i, name in enumerate(entities):
        for p in active:
            Z[i, p] = store.lookup(name, p)

    mu = Z.mean(axis=-1, keepdims=True)
    var = ((Z - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (Z - mu) * inv_std
    ln = params.ln_gain[None, :, :] * xhat + params.ln_bias[None, :, :]
    Zh = np.einsum("pod,npd->npo", params.W_p, ln) + params.b_p[None, :, :]

    if params.aggregation == AGG_SUM:
        z_agg = Zh.sum(axis=1)
    elif params.aggregation == AGG_MEAN:
        z_agg = Zh.sum(axis=1) / P
    elif params.aggregation == AGG_CONCAT:
        z_agg = Zh.reshape(n, P * params.d_p)
    else:  # type-only
        z_agg = Zh[:, 0, :]

    relu_agg = np.maximum(z_agg, 0.0)
    h_sem = _sigmoid(relu_agg @ params.W_o.T)
    return EncodeTrace(Z=Z, xhat=xhat, inv_std=inv_std, Zh=Zh, z_agg=z_agg,
                       relu_agg=relu_agg, h_sem=h_sem, active_prompts=active)


def encode(params: SemanticEncoderParams, store: EmbeddingStore, entity: str) -> np.ndarray:
    """Semantic embedding of one entity; every coordinate lies in (0, 1)."""
    return encode_batch(params, store, [entity]).h_sem[0]


def encode_backward(
    params: SemanticEncoderParams,
    trace: EncodeTrace,
    d_hsem: np.ndarray,
    grads: dict[str, np.ndarray],
    prefix: str = "sem",
) -> None:
    """Accumulate encoder parameter gradients for a batch into `grads`."""
    h = trace.h_sem
    d_pre = d_hsem * h * (1.0 - h)                     # (N, sem)
    grads[f"{prefix}.W_o"] += d_pre.T @ trace.relu_agg
    d_relu = d_pre @ params.W_o                         # (N, d_agg)
    d_agg = d_relu * (trace.z_agg > 0.0)

    n, P = trace.Z.shape[0], params.n_prompts
    dZh = np.zeros_like(trace.Zh)
    if params.aggregation == AGG_SUM:
        dZh[:, :, :] = d_agg[:, None, :]
    elif params.aggregation == AGG_MEAN:
        dZh[:, :, :] = d_agg[:, None, :] / P
    elif params.aggregation == AGG_CONCAT:
        dZh[:, :, :] = d_agg.reshape(n, P, params.d_p)
    else:  # type-only: only prompt p1 carries gradient
        dZh[:, 0, :] = d_agg

    ln = params.ln_gain[None, :, :] * trace.xhat + params.ln_bias[None, :, :]
    grads[f"{prefix}.W_p"] += np.einsum("npo,npd->pod", dZh, ln)
    grads[f"{prefix}.b_p"] += dZh.sum(axis=0)
    d_ln = np.einsum("pod,npo->npd", params.W_p, dZh)
    grads[f"{prefix}.ln_gain"] += (d_ln * trace.xhat).sum(axis=0)
    grads[f"{prefix}.ln_bias"] += d_ln.sum(axis=0)
    # Raw vectors are inputs, not parameters: no gradient flows past LN.


def initial_node_embedding(h_pos: np.ndarray, h_sem: np.ndarray | None, semantic_enabled: bool, sem_dim: int) -> np.ndarray:
    """Layer-0 node embedding: positional labels joined with the semantic
    signal (zeros when semantics are disabled, so downstream dims match)."""
    if not semantic_enabled or h_sem is None:
        h_sem = np.zeros(h_pos.shape[:-1] + (sem_dim,))
    return np.concatenate([h_pos, h_sem], axis=-1)
