"""Attention-gated relational GNN scoring of enclosing subgraphs.

Per layer, each node aggregates gated, relation-composed messages from its
neighbors on top of a self-loop transform:

    h_i' = ReLU(W0 h_i + sum_r sum_{j in N^r(i)} alpha * W_r (h_j - e_r))
    e_r' = W_rel e_r
    alpha = sigmoid(w_a . ReLU(W_s [h_j | h_i | e_r | e_rt] + b_s) + b_a)

Relation matrices W_r share a basis: W_r = sum_b coeff[r, b] V_b, so memory
grows with the basis count, not the relation count. Messages flow both ways
by materializing an inverse edge with relation id r + relation_count for
every data edge. The final score concatenates, over layers 1..L, the mean-
pooled node matrix, the two anchor rows, and the last-layer embedding of
the target relation, then applies a linear head.

Everything is float64. The backward pass is written out by hand and checked
against central finite differences in the test suite; gradients accumulate
into a flat name -> array mapping that mirrors `ModelParams.tensors()`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .semantic import (
    AGG_SUM,
    EmbeddingStore,
    EncodeTrace,
    SemanticEncoderParams,
    encode_backward,
    encode_batch,
    glorot,
    init_semantic_params,
    _sigmoid,
)
from .subgraph import EnclosingSubgraph, positional_matrix

CHECKPOINT_MAGIC = b"TYLRCKP1"


@dataclass
class ModelHyper:
    num_relations: int       # original relation vocabulary size
    k: int = 3
    L: int = 3
    B: int = 4
    hidden: int = 32
    sem_dim: int = 24
    d_p: int = 64
    dim_raw: int = 0         # raw store dimension; 0 when semantics disabled
    n_prompts: int = 6
    aggregation: str = AGG_SUM
    semantic_enabled: bool = True
    seed: int = 0

    @property
    def pos_dim(self) -> int:
        return 2 * self.k + 2

    @property
    def d0(self) -> int:
        return self.pos_dim + self.sem_dim

    @property
    def num_relations_doubled(self) -> int:
        return 2 * self.num_relations

    def to_dict(self) -> dict:
        return {
            "num_relations": self.num_relations, "k": self.k, "L": self.L, "B": self.B,
            "hidden": self.hidden, "sem_dim": self.sem_dim, "d_p": self.d_p,
            "dim_raw": self.dim_raw, "n_prompts": self.n_prompts,
            "aggregation": self.aggregation, "semantic_enabled": self.semantic_enabled,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelHyper":
        return cls(**d)


@dataclass
class LayerParams:
    W0: np.ndarray       # (d_out, d_in) self-loop
    V: np.ndarray        # (B, d_out, d_in) shared basis
    coeff: np.ndarray    # (R2, B) per-relation basis coefficients
    W_rel: np.ndarray    # (d_out, d_in) relation update
    W_s: np.ndarray      # (d_att, 4 * d_in) attention feature map
    b_s: np.ndarray      # (d_att,)
    w_alpha: np.ndarray  # (d_att,)
    b_alpha: np.ndarray  # (1,)

    @property
    def d_in(self) -> int:
        return self.W0.shape[1]

    @property
    def d_out(self) -> int:
        return self.W0.shape[0]

    def relation_matrices(self) -> np.ndarray:
        """Materialize every W_r from the shared basis, shape (R2, d_out, d_in)."""
        return np.einsum("rb,bod->rod", self.coeff, self.V)


@dataclass
class ModelParams:
    hyper: ModelHyper
    rel_emb: np.ndarray            # (R2, d0)
    layers: list[LayerParams]
    W_f: np.ndarray                # (L * 4 * hidden,)
    semantic: SemanticEncoderParams | None

    def tensors(self) -> dict[str, np.ndarray]:
        """Canonical name -> array view of every learnable tensor."""
        out: dict[str, np.ndarray] = {"rel_emb": self.rel_emb}
        for i, lp in enumerate(self.layers, start=1):
            out[f"layer{i}.W0"] = lp.W0
            out[f"layer{i}.V"] = lp.V
            out[f"layer{i}.coeff"] = lp.coeff
            out[f"layer{i}.W_rel"] = lp.W_rel
            out[f"layer{i}.W_s"] = lp.W_s
            out[f"layer{i}.b_s"] = lp.b_s
            out[f"layer{i}.w_alpha"] = lp.w_alpha
            out[f"layer{i}.b_alpha"] = lp.b_alpha
        out["W_f"] = self.W_f
        if self.semantic is not None:
            out["sem.ln_gain"] = self.semantic.ln_gain
            out["sem.ln_bias"] = self.semantic.ln_bias
            out["sem.W_p"] = self.semantic.W_p
            out["sem.b_p"] = self.semantic.b_p
            out["sem.W_o"] = self.semantic.W_o
        return out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.tensors().items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            hyper=self.hyper,
            rel_emb=self.rel_emb.copy(),
            layers=[
                LayerParams(lp.W0.copy(), lp.V.copy(), lp.coeff.copy(), lp.W_rel.copy(),
                            lp.W_s.copy(), lp.b_s.copy(), lp.w_alpha.copy(), lp.b_alpha.copy())
                for lp in self.layers
            ],
            W_f=self.W_f.copy(),
            semantic=None if self.semantic is None else SemanticEncoderParams(
                ln_gain=self.semantic.ln_gain.copy(), ln_bias=self.semantic.ln_bias.copy(),
                W_p=self.semantic.W_p.copy(), b_p=self.semantic.b_p.copy(),
                W_o=self.semantic.W_o.copy(), aggregation=self.semantic.aggregation,
            ),
        )


def init_model(hyper: ModelHyper, rng: np.random.Generator | None = None) -> ModelParams:
    """Glorot-uniform matrices and relation embeddings, zero biases."""
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(hyper.seed))
    R2 = hyper.num_relations_doubled
    d0, d, datt = hyper.d0, hyper.hidden, hyper.hidden
    layers = []
    d_in = d0
    for _ in range(hyper.L):
        layers.append(LayerParams(
            W0=glorot(rng, (d, d_in)),
            V=glorot(rng, (hyper.B, d, d_in)),
            coeff=glorot(rng, (R2, hyper.B)),
            W_rel=glorot(rng, (d, d_in)),
            W_s=glorot(rng, (datt, 4 * d_in)),
            b_s=np.zeros(datt),
            w_alpha=glorot(rng, (1, datt))[0],
            b_alpha=np.zeros(1),
        ))
        d_in = d
    semantic = None
    if hyper.semantic_enabled:
        if hyper.dim_raw <= 0:
            raise DataError("semantic encoder requires a positive raw dimension")
        semantic = init_semantic_params(
            rng, hyper.n_prompts, hyper.dim_raw, hyper.d_p, hyper.sem_dim, hyper.aggregation
        )
    return ModelParams(
        hyper=hyper,
        rel_emb=glorot(rng, (R2, d0)),
        layers=layers,
        W_f=glorot(rng, (1, hyper.L * 4 * d))[0],
        semantic=semantic,
    )


@dataclass
class SubgraphTensors:
    """Index arrays of the doubled directed message edges of a subgraph."""

    src: np.ndarray   # message source node (local index)
    dst: np.ndarray   # message destination node (local index)
    rel: np.ndarray   # relation id in the doubled vocabulary
    num_nodes: int
    u_idx: int
    v_idx: int

    @classmethod
    def from_subgraph(cls, sg: EnclosingSubgraph, num_relations: int) -> "SubgraphTensors":
        src, dst, rel = [], [], []
        for h, r, t in sg.edges:
            if not (0 <= h < sg.num_nodes and 0 <= t < sg.num_nodes):
                raise DataError(f"edge ({h},{r},{t}) references a node outside the subgraph")
            # (h, r, t): t is an outgoing neighbor of h, so h receives from t;
            # the inverse edge delivers the reverse message under r + R.
            src.append(t); dst.append(h); rel.append(r)
            src.append(h); dst.append(t); rel.append(r + num_relations)
        return cls(
            src=np.asarray(src, dtype=np.int64),
            dst=np.asarray(dst, dtype=np.int64),
            rel=np.asarray(rel, dtype=np.int64),
            num_nodes=sg.num_nodes,
            u_idx=0,
            v_idx=1 if sg.num_nodes > 1 else 0,
        )

    @property
    def num_messages(self) -> int:
        return len(self.src)


def attention_weight(layer: LayerParams, h_j: np.ndarray, h_i: np.ndarray,
                     e_r: np.ndarray, e_rt: np.ndarray) -> float:
    """Gate in (0, 1) for one edge given endpoint, relation, and target context."""
    s = np.maximum(layer.W_s @ np.concatenate([h_j, h_i, e_r, e_rt]) + layer.b_s, 0.0)
    return float(_sigmoid(np.array([layer.w_alpha @ s + layer.b_alpha[0]]))[0])


@dataclass
class LayerTrace:
    H_in: np.ndarray
    E_in: np.ndarray
    s_in: np.ndarray | None
    s_pre: np.ndarray | None
    s: np.ndarray | None
    alpha: np.ndarray | None
    diff: np.ndarray | None
    msg_core: np.ndarray | None
    Wr_all: np.ndarray | None
    H_pre: np.ndarray
    H_out: np.ndarray
    E_out: np.ndarray


def layer_forward(layer: LayerParams, st: SubgraphTensors, H: np.ndarray,
                  E: np.ndarray, r_t: int) -> LayerTrace:
    E_out = E @ layer.W_rel.T
    A = np.zeros((st.num_nodes, layer.d_out))
    s_in = s_pre = s = alpha = diff = msg_core = Wr_all = None
    if st.num_messages:
        Hj = H[st.src]
        Hi = H[st.dst]
        Er = E[st.rel]
        ert = np.broadcast_to(E[r_t], Hj.shape)
        s_in = np.concatenate([Hj, Hi, Er, ert], axis=1)
        s_pre = s_in @ layer.W_s.T + layer.b_s
        s = np.maximum(s_pre, 0.0)
        alpha = _sigmoid(s @ layer.w_alpha + layer.b_alpha[0])
        diff = Hj - Er
        Wr_all = layer.relation_matrices()
        msg_core = np.einsum("mod,md->mo", Wr_all[st.rel], diff)
        np.add.at(A, st.dst, alpha[:, None] * msg_core)
    H_pre = H @ layer.W0.T + A
    H_out = np.maximum(H_pre, 0.0)
    return LayerTrace(H_in=H, E_in=E, s_in=s_in, s_pre=s_pre, s=s, alpha=alpha,
                      diff=diff, msg_core=msg_core, Wr_all=Wr_all,
                      H_pre=H_pre, H_out=H_out, E_out=E_out)


def layer_backward(
    layer: LayerParams,
    st: SubgraphTensors,
    tr: LayerTrace,
    dH_out: np.ndarray,
    dE_out: np.ndarray,
    grads: dict[str, np.ndarray],
    name: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop one layer; returns gradients w.r.t. the layer's inputs."""
    dH_in = np.zeros_like(tr.H_in)
    dE_in = np.zeros_like(tr.E_in)

    # e_r' = W_rel e_r
    dE_in += dE_out @ layer.W_rel
    grads[f"{name}.W_rel"] += dE_out.T @ tr.E_in

    dH_pre = dH_out * (tr.H_pre > 0.0)
    grads[f"{name}.W0"] += dH_pre.T @ tr.H_in
    dH_in += dH_pre @ layer.W0

    if st.num_messages:
        d_in = layer.d_in
        dmsg = dH_pre[st.dst]                               # (M, d_out)
        dalpha = np.einsum("mo,mo->m", dmsg, tr.msg_core)
        dmsg_core = tr.alpha[:, None] * dmsg

        dWr_edges = np.einsum("mo,md->mod", dmsg_core, tr.diff)
        dWr_full = np.zeros_like(tr.Wr_all)
        np.add.at(dWr_full, st.rel, dWr_edges)
        grads[f"{name}.V"] += np.einsum("rb,rod->bod", layer.coeff, dWr_full)
        grads[f"{name}.coeff"] += np.einsum("rod,bod->rb", dWr_full, layer.V)

        ddiff = np.einsum("mod,mo->md", tr.Wr_all[st.rel], dmsg_core)
        np.add.at(dH_in, st.src, ddiff)
        np.subtract.at(dE_in, st.rel, ddiff)

        da_pre = dalpha * tr.alpha * (1.0 - tr.alpha)
        grads[f"{name}.w_alpha"] += tr.s.T @ da_pre
        grads[f"{name}.b_alpha"] += da_pre.sum(keepdims=True)
        ds = np.outer(da_pre, layer.w_alpha)
        ds_pre = ds * (tr.s_pre > 0.0)
        grads[f"{name}.W_s"] += ds_pre.T @ tr.s_in
        grads[f"{name}.b_s"] += ds_pre.sum(axis=0)
        ds_in = ds_pre @ layer.W_s
        np.add.at(dH_in, st.src, ds_in[:, :d_in])
        np.add.at(dH_in, st.dst, ds_in[:, d_in:2 * d_in])
        np.add.at(dE_in, st.rel, ds_in[:, 2 * d_in:3 * d_in])
        d_ert = ds_in[:, 3 * d_in:].sum(axis=0)
        return dH_in, dE_in, d_ert
    return dH_in, dE_in, np.zeros(layer.d_in)


@dataclass
class ForwardTrace:
    st: SubgraphTensors
    r_t: int
    layers: list[LayerTrace]
    blocks: np.ndarray
    score: float
    encode: EncodeTrace | None = None


def score_forward(model: ModelParams, st: SubgraphTensors, h0: np.ndarray,
                  r_t: int, encode_trace: EncodeTrace | None = None) -> ForwardTrace:
    if h0.shape != (st.num_nodes, model.hyper.d0):
        raise DataError(f"h0 shape {h0.shape} does not match ({st.num_nodes}, {model.hyper.d0})")
    H, E = h0, model.rel_emb
    traces = []
    for lp in model.layers:
        tr = layer_forward(lp, st, H, E, r_t)
        traces.append(tr)
        H, E = tr.H_out, tr.E_out
    e_rt_last = traces[-1].E_out[r_t]
    blocks = np.concatenate([
        np.concatenate([tr.H_out.mean(axis=0), tr.H_out[st.u_idx], tr.H_out[st.v_idx], e_rt_last])
        for tr in traces
    ])
    value = float(model.W_f @ blocks)
    if not np.isfinite(value):
        raise NumericError(f"non-finite score for target relation {r_t}")
    return ForwardTrace(st=st, r_t=r_t, layers=traces, blocks=blocks, score=value,
                        encode=encode_trace)


def score(model: ModelParams, sg: EnclosingSubgraph, h0: np.ndarray, r_t: int) -> float:
    st = SubgraphTensors.from_subgraph(sg, model.hyper.num_relations)
    return score_forward(model, st, h0, r_t).score


def score_backward(model: ModelParams, trace: ForwardTrace, dscore: float,
                   grads: dict[str, np.ndarray]) -> np.ndarray:
    """Backprop d(loss)/d(score) to every parameter; returns d(loss)/d(h0)."""
    st, L, d = trace.st, model.hyper.L, model.hyper.hidden
    n = st.num_nodes
    grads["W_f"] += dscore * trace.blocks
    dblocks = dscore * model.W_f

    dH = [np.zeros_like(tr.H_out) for tr in trace.layers]
    dE = [np.zeros_like(tr.E_out) for tr in trace.layers]
    for l in range(L):
        blk = dblocks[l * 4 * d:(l + 1) * 4 * d]
        dH[l] += blk[:d] / n
        dH[l][st.u_idx] += blk[d:2 * d]
        dH[l][st.v_idx] += blk[2 * d:3 * d]
        dE[L - 1][trace.r_t] += blk[3 * d:]

    dh0 = None
    for l in range(L - 1, -1, -1):
        dH_in, dE_in, d_ert = layer_backward(
            model.layers[l], st, trace.layers[l], dH[l], dE[l], grads, f"layer{l + 1}"
        )
        dE_in[trace.r_t] += d_ert
        if l > 0:
            dH[l - 1] += dH_in
            dE[l - 1] += dE_in
        else:
            dh0 = dH_in
            grads["rel_emb"] += dE_in
    return dh0


@dataclass
class Example:
    """One scoring instance: subgraph, positional features, node entities."""

    sg: EnclosingSubgraph
    st: SubgraphTensors
    h_pos: np.ndarray          # (N, 2k+2)
    entities: list[str]        # entity string per node, for the store lookup
    r_t: int


def make_example(sg: EnclosingSubgraph, entity_names: list[str], num_relations: int) -> Example:
    return Example(
        sg=sg,
        st=SubgraphTensors.from_subgraph(sg, num_relations),
        h_pos=positional_matrix(sg),
        entities=[entity_names[g] for g in sg.nodes],
        r_t=sg.target.rel,
    )


def example_forward(model: ModelParams, store: EmbeddingStore | None, ex: Example) -> ForwardTrace:
    """Build the layer-0 embedding (jointly through the semantic encoder when
    enabled) and run the scorer."""
    enc = None
    if model.hyper.semantic_enabled:
        if model.semantic is None or store is None:
            raise DataError("semantic scoring requires encoder params and a store")
        enc = encode_batch(model.semantic, store, ex.entities)
        h0 = np.concatenate([ex.h_pos, enc.h_sem], axis=1)
    elif model.hyper.sem_dim:
        h0 = np.concatenate([ex.h_pos, np.zeros((ex.h_pos.shape[0], model.hyper.sem_dim))], axis=1)
    else:
        h0 = ex.h_pos
    return score_forward(model, ex.st, h0, ex.r_t, encode_trace=enc)


def example_backward(model: ModelParams, trace: ForwardTrace, dscore: float,
                     grads: dict[str, np.ndarray]) -> None:
    dh0 = score_backward(model, trace, dscore, grads)
    if trace.encode is not None:
        pos_dim = model.hyper.pos_dim
        encode_backward(model.semantic, trace.encode, dh0[:, pos_dim:], grads)


def pair_loss_and_gradients(
    model: ModelParams,
    store: EmbeddingStore | None,
    pairs: list[tuple[Example, Example]],
    gamma: float,
    grads: dict[str, np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Hinge loss over (positive, negative) pairs and its exact gradients.

    Loss = sum_i max(0, f(neg_i) - f(pos_i) + gamma). Gradient reduction is
    in pair order, so results are identical run to run.
    """
    if not pairs:
        raise DataError("empty batch")
    grads = grads if grads is not None else model.zero_grads()
    loss = 0.0
    for pos, neg in pairs:
        tr_pos = example_forward(model, store, pos)
        tr_neg = example_forward(model, store, neg)
        margin = tr_neg.score - tr_pos.score + gamma
        if margin > 0.0:
            loss += margin
            example_backward(model, tr_neg, 1.0, grads)
            example_backward(model, tr_pos, -1.0, grads)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name}")
    return loss, grads


def pair_loss(model: ModelParams, store: EmbeddingStore | None,
              pairs: list[tuple[Example, Example]], gamma: float) -> float:
    """Loss only, used by the finite-difference checks."""
    loss = 0.0
    for pos, neg in pairs:
        loss += max(0.0, example_forward(model, store, neg).score
                    - example_forward(model, store, pos).score + gamma)
    return loss


def save_checkpoint(directory: str | Path, model: ModelParams) -> None:
    """Write manifest.json + params.bin (named float64 tensor blocks)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "manifest.json").write_text(
        json.dumps(model.hyper.to_dict(), indent=2), encoding="utf-8"
    )
    with open(directory / "params.bin", "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in model.tensors().items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(directory: str | Path) -> ModelParams:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"missing checkpoint manifest: {manifest_path}")
    hyper = ModelHyper.from_dict(json.loads(manifest_path.read_text(encoding="utf-8")))
    raw = (directory / "params.bin").read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"bad checkpoint magic {raw[:8]!r}")
    tensors: dict[str, np.ndarray] = {}
    off = 8
    while off < len(raw):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    model = init_model(hyper)
    for name, arr in model.tensors().items():
        if name not in tensors:
            raise DataError(f"checkpoint missing tensor {name}")
        if tensors[name].shape != arr.shape:
            raise DataError(f"checkpoint tensor {name} has shape {tensors[name].shape}, expected {arr.shape}")
        arr[...] = tensors[name]
    return model
