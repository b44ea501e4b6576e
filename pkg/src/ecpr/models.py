"""Pre-ranking model families with hand-written backward passes.

Every model maps a batch of categorical feature rows to :class:`Heads` and
exposes ``loss_and_grad`` for training and gradient checking.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .cascade_sim import TAG_CLICK, TAG_EXPOSE, TAG_IMPLY, CascadeData, LabelError
from .gates import HardConcrete, feature_gate, feature_gate_backward, hc_expected_l0, hc_expected_l0_grad, hc_sample, hc_test_gate
from .numerics import (
    PROB_EPS,
    Mlp,
    ParameterSet,
    bce_grad,
    bce_logit_grad,
    bce_loss,
    clamp_prob,
    pairwise_sum,
    sigmoid,
    softmax,
    softmax_xent_grad,
    softmax_xent_loss,
)

EMBED_DIM = 8
HIDDEN = [128, 64, 32]
MODEL_KINDS = ("two_tower", "deep_baseline", "deep_baseline_softmax", "ecm", "esmm", "ecmm")
HEAD_SELECTORS = ("t1", "t2", "pETR", "pCTR")


@dataclass
class Heads:
    """Per-sample head outputs.

    ``t2``/``t3`` are ``None`` for single-output models. ``ctr`` is set when a
    model has its own CTR tower (ESMM); otherwise pCTR is derived.
    """

    t1: np.ndarray
    t2: np.ndarray | None = None
    t3: np.ndarray | None = None
    t4: np.ndarray | None = None
    ctr: np.ndarray | None = None
    etr: np.ndarray | None = None
    clamp_etr: bool = False

    @property
    def p_etctr(self) -> np.ndarray:
        return self.t1

    @property
    def p_etr(self) -> np.ndarray:
        if self.etr is not None:
            return self.etr
        if self.t2 is None:
            raise ValueError("model has no exposure head")
        s = self.t1 + self.t2
        return clamp_prob(s) if self.clamp_etr else s

    @property
    def p_ctr(self) -> np.ndarray:
        if self.ctr is not None:
            return self.ctr
        return self.t1 / self.p_etr

    def select(self, head: str) -> np.ndarray:
        if head == "t1":
            return self.t1
        if head == "t2":
            if self.t2 is None:
                raise ValueError("model has no t2 head")
            return self.t2
        if head == "pETR":
            return self.p_etr
        if head == "pCTR":
            return self.p_ctr
        raise ValueError(f"unknown head selector {head!r}; expected one of {HEAD_SELECTORS}")

    def take(self, idx) -> "Heads":
        def t(a):
            return None if a is None else a[idx]

        return Heads(t(self.t1), t(self.t2), t(self.t3), t(self.t4), t(self.ctr), t(self.etr), self.clamp_etr)


def check_labels(y5: np.ndarray, y6: np.ndarray) -> None:
    if np.any(y6 > y5):
        raise LabelError("label inconsistency: y6=1 with y5=0")


def class_index(domain_tag: np.ndarray) -> np.ndarray:
    tag = np.asarray(domain_tag)
    if np.any((tag < TAG_CLICK) | (tag > TAG_IMPLY)):
        raise LabelError(f"unknown domain tag in {np.unique(tag)}")
    return tag - 1


class Model:
    kind: str = ""

    def __init__(self, vocab_sizes: Sequence[int], fields: Sequence[int], seed_label: str = ""):
        self.vocab_sizes = list(vocab_sizes)
        self.fields = list(fields)
        self.input_dim = EMBED_DIM * len(self.fields)

    # -- embeddings -------------------------------------------------------

    def _init_embeddings(self, params: ParameterSet, rng: np.random.Generator) -> None:
        for k in self.fields:
            params[f"emb.f{k:02d}"] = rng.uniform(-0.05, 0.05, (self.vocab_sizes[k] + 1, EMBED_DIM))

    def _ids(self, features: np.ndarray, fields: Sequence[int]) -> np.ndarray:
        out = np.empty((len(features), len(fields)), dtype=np.int64)
        for c, k in enumerate(fields):
            col = features[:, k]
            v = self.vocab_sizes[k]
            out[:, c] = np.where((col >= 0) & (col < v), col, v)
        return out

    def _embed(self, params, features: np.ndarray, fields: Sequence[int] | None = None):
        fields = self.fields if fields is None else fields
        ids = self._ids(features, fields)
        E = np.concatenate([params[f"emb.f{k:02d}"][ids[:, c]] for c, k in enumerate(fields)], axis=1)
        return E, ids

    def _embed_backward(self, grads, ids: np.ndarray, dE: np.ndarray, fields: Sequence[int] | None = None):
        fields = self.fields if fields is None else fields
        for c, k in enumerate(fields):
            np.add.at(grads[f"emb.f{k:02d}"], ids[:, c], dE[:, c * EMBED_DIM : (c + 1) * EMBED_DIM])

    # -- interface --------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> ParameterSet:
        raise NotImplementedError

    def forward(self, params, features: np.ndarray, noise=None, mode: str = "eval"):
        """Returns ``(heads, cache)``."""
        raise NotImplementedError

    def loss_and_grad(self, params, batch: CascadeData, noise=None):
        raise NotImplementedError

    def loss(self, params, batch: CascadeData, noise=None) -> float:
        return self.loss_and_grad(params, batch, noise)[0]

    def draw_noise(self, rng: np.random.Generator):
        return None

    def predict(self, params, features: np.ndarray, chunk: int = 8192, mode: str = "eval") -> Heads:
        parts = [self.forward(params, features[a : a + chunk], mode=mode)[0] for a in range(0, len(features), chunk)]
        if not parts:
            raise ValueError("predict called on an empty batch")

        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if vals[0] is None else np.concatenate(vals)

        return Heads(cat("t1"), cat("t2"), cat("t3"), cat("t4"), cat("ctr"), cat("etr"), parts[0].clamp_etr)

    def gates_l0(self, params) -> float:
        return 0.0


# ---------------------------------------------------------------------------
# single-task and softmax MLPs


class DeepBaseline(Model):
    """Sigmoid click model over concatenated embeddings."""

    kind = "deep_baseline"

    def __init__(self, vocab_sizes, fields, **_):
        super().__init__(vocab_sizes, fields)
        self.mlp = Mlp("mlp", [self.input_dim, *HIDDEN, 1], final_linear=True)

    def init_params(self, rng):
        params = ParameterSet()
        self._init_embeddings(params, rng)
        self.mlp.init(params, rng)
        return params

    def forward(self, params, features, noise=None, mode="eval"):
        E, ids = self._embed(params, features)
        logit, acts = self.mlp.forward(params, E)
        p = np.asarray(sigmoid(logit[:, 0]))
        return Heads(p), (ids, acts)

    def loss_and_grad(self, params, batch, noise=None):
        check_labels(batch.y5, batch.y6)
        heads, (ids, acts) = self.forward(params, batch.features)
        n = len(batch)
        loss = float(np.mean(bce_loss(batch.y6, heads.t1)))
        grads = params.zeros_like()
        dlogit = bce_logit_grad(batch.y6, heads.t1)[:, None] / n
        dE = self.mlp.backward(params, grads, acts, dlogit)
        self._embed_backward(grads, ids, dE)
        return loss, grads


class SoftmaxMlp(Model):
    """Three-way softmax over (click, non-click exposure, implication)."""

    kind = "ecm"

    def __init__(self, vocab_sizes, fields, **_):
        super().__init__(vocab_sizes, fields)
        self.mlp = Mlp("mlp", [self.input_dim, *HIDDEN, 3], final_linear=True)

    def init_params(self, rng):
        params = ParameterSet()
        self._init_embeddings(params, rng)
        self.mlp.init(params, rng)
        return params

    def forward(self, params, features, noise=None, mode="eval"):
        E, ids = self._embed(params, features)
        logits, acts = self.mlp.forward(params, E)
        probs = softmax(logits)
        return Heads(probs[:, 0], probs[:, 1], probs[:, 2]), (ids, acts, logits)

    def loss_and_grad(self, params, batch, noise=None):
        check_labels(batch.y5, batch.y6)
        labels = class_index(batch.domain_tag)
        _, (ids, acts, logits) = self.forward(params, batch.features)
        n = len(batch)
        loss = float(np.mean(softmax_xent_loss(labels, logits)))
        grads = params.zeros_like()
        dE = self.mlp.backward(params, grads, acts, softmax_xent_grad(labels, logits) / n)
        self._embed_backward(grads, ids, dE)
        return loss, grads


class DeepBaselineSoftmax(SoftmaxMlp):
    kind = "deep_baseline_softmax"


class Ecm(SoftmaxMlp):
    kind = "ecm"


# ---------------------------------------------------------------------------
# two-tower


class TwoTower(Model):
    """User and item MLP towers scored by a dot product."""

    kind = "two_tower"

    def __init__(self, vocab_sizes, fields, user_fields: Sequence[int] = (), item_fields: Sequence[int] = (), **_):
        super().__init__(vocab_sizes, fields)
        self.user_fields = [k for k in user_fields if k in self.fields]
        self.item_fields = [k for k in item_fields if k in self.fields]
        if not self.user_fields or not self.item_fields:
            raise ValueError("two_tower needs at least one user field and one item field")
        self.user_mlp = Mlp("user", [EMBED_DIM * len(self.user_fields), *HIDDEN], final_linear=True)
        self.item_mlp = Mlp("item", [EMBED_DIM * len(self.item_fields), *HIDDEN], final_linear=True)

    def init_params(self, rng):
        params = ParameterSet()
        self._init_embeddings(params, rng)
        self.user_mlp.init(params, rng)
        self.item_mlp.init(params, rng)
        return params

    def forward(self, params, features, noise=None, mode="eval"):
        Eu, ids_u = self._embed(params, features, self.user_fields)
        Ei, ids_i = self._embed(params, features, self.item_fields)
        u, acts_u = self.user_mlp.forward(params, Eu)
        v, acts_i = self.item_mlp.forward(params, Ei)
        score = np.einsum("ij,ij->i", u, v)
        return Heads(np.asarray(sigmoid(score))), (ids_u, ids_i, acts_u, acts_i, u, v)

    def loss_and_grad(self, params, batch, noise=None):
        check_labels(batch.y5, batch.y6)
        heads, (ids_u, ids_i, acts_u, acts_i, u, v) = self.forward(params, batch.features)
        n = len(batch)
        loss = float(np.mean(bce_loss(batch.y6, heads.t1)))
        grads = params.zeros_like()
        ds = bce_logit_grad(batch.y6, heads.t1)[:, None] / n
        dEu = self.user_mlp.backward(params, grads, acts_u, ds * v)
        dEi = self.item_mlp.backward(params, grads, acts_i, ds * u)
        self._embed_backward(grads, ids_u, dEu, self.user_fields)
        self._embed_backward(grads, ids_i, dEi, self.item_fields)
        return loss, grads


def two_tower_score(user_vec, item_vec) -> tuple[float, float]:
    """Dot-product score and its sigmoid probability."""
    s = float(np.dot(np.asarray(user_vec, dtype=np.float64), np.asarray(item_vec, dtype=np.float64)))
    return s, float(sigmoid(s))


# ---------------------------------------------------------------------------
# ESMM


class Esmm(Model):
    """Exposure tower times CTR tower over shared embeddings."""

    kind = "esmm"

    def __init__(self, vocab_sizes, fields, **_):
        super().__init__(vocab_sizes, fields)
        self.etr_mlp = Mlp("etr", [self.input_dim, *HIDDEN, 1], final_linear=True)
        self.ctr_mlp = Mlp("ctr", [self.input_dim, *HIDDEN, 1], final_linear=True)

    def init_params(self, rng):
        params = ParameterSet()
        self._init_embeddings(params, rng)
        self.etr_mlp.init(params, rng)
        self.ctr_mlp.init(params, rng)
        return params

    def forward(self, params, features, noise=None, mode="eval"):
        E, ids = self._embed(params, features)
        l_etr, acts_e = self.etr_mlp.forward(params, E)
        l_ctr, acts_c = self.ctr_mlp.forward(params, E)
        p_etr = np.asarray(sigmoid(l_etr[:, 0]))
        p_ctr = np.asarray(sigmoid(l_ctr[:, 0]))
        p_etctr = p_etr * p_ctr
        heads = Heads(p_etctr, p_etr - p_etctr, 1.0 - p_etr, ctr=p_ctr, etr=p_etr)
        return heads, (ids, acts_e, acts_c)

    def loss_and_grad(self, params, batch, noise=None):
        check_labels(batch.y5, batch.y6)
        heads, (ids, acts_e, acts_c) = self.forward(params, batch.features)
        n = len(batch)
        p_etr, p_ctr, p = heads.etr, heads.ctr, heads.t1
        loss = float(np.mean(bce_loss(batch.y5, p_etr) + bce_loss(batch.y6, p)))
        g_p = bce_grad(batch.y6, p)
        d_etr = bce_logit_grad(batch.y5, p_etr) + g_p * p_ctr * p_etr * (1.0 - p_etr)
        d_ctr = g_p * p_etr * p_ctr * (1.0 - p_ctr)
        grads = params.zeros_like()
        dE = self.etr_mlp.backward(params, grads, acts_e, d_etr[:, None] / n)
        dE = dE + self.ctr_mlp.backward(params, grads, acts_c, d_ctr[:, None] / n)
        self._embed_backward(grads, ids, dE)
        return loss, grads


# ---------------------------------------------------------------------------
# ECMM


SUB1, SUB2 = 8, 4
SUB_WIDTH = 32
SHARED_WIDTH = 128
TOWER_HIDDEN = 16
ROUTE_EPS = 1e-8
TOWER_BIAS_INIT = -2.0


def route_weights(r: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column-normalised routing weights ``r*z / sum|r*z|``; returns ``(w, a, denom)``."""
    a = r * z
    denom = np.maximum(np.abs(a).sum(axis=0), ROUTE_EPS)
    return a / denom, a, denom


def route_weights_backward(dw: np.ndarray, a: np.ndarray, denom: np.ndarray) -> np.ndarray:
    """d loss / d a given d loss / d w."""
    active = np.abs(a).sum(axis=0) >= ROUTE_EPS
    inner = (dw * a).sum(axis=0) / denom**2
    da = dw / denom - np.sign(a) * np.where(active, inner, 0.0)
    return da


def route(w: np.ndarray, outputs: np.ndarray) -> np.ndarray:
    """``out[j] = sum_i w[i, j] * outputs[i]`` with a fixed pairwise reduction order."""
    return np.stack([pairwise_sum(w[:, j, None, None] * outputs) for j in range(w.shape[1])])


def route_backward(w: np.ndarray, outputs: np.ndarray, dout: np.ndarray):
    """Returns ``(d outputs, d w)``."""
    d_outputs = np.einsum("ij,jbd->ibd", w, dout)
    dw = np.einsum("ibd,jbd->ij", outputs, dout)
    return d_outputs, dw


class Ecmm(Model):
    """Feature gate, routed sub-networks and independent sigmoid towers.

    ``mode`` selects the gate behaviour: ``train`` samples hard-concrete
    gates from ``noise``, ``eval`` uses the deterministic test gate and
    ``open`` forces every gate (including the feature gate) fully open.
    """

    kind = "ecmm"

    def __init__(
        self,
        vocab_sizes,
        fields,
        towers: int = 3,
        hc: HardConcrete | None = None,
        l0_lambda: float = 1e-5,
        log_alpha_init: float = 2.0,
        gate_placement: str = "routing_and_towers",
        **_,
    ):
        super().__init__(vocab_sizes, fields)
        if gate_placement not in ("routing_and_towers", "routing_only"):
            raise ValueError(f"unknown gate placement {gate_placement!r}")
        self.gate_placement = gate_placement
        if towers not in (3, 4):
            raise ValueError(f"towers must be 3 or 4, got {towers}")
        self.towers = towers
        self.hc = hc or HardConcrete()
        self.l0_lambda = l0_lambda
        self.log_alpha_init = log_alpha_init
        self.shared = Mlp("shared", [self.input_dim, SHARED_WIDTH])
        self.sub1 = [Mlp(f"sub1.{i}", [SHARED_WIDTH, SUB_WIDTH, SUB_WIDTH]) for i in range(SUB1)]
        self.sub2 = [Mlp(f"sub2.{j}", [SUB_WIDTH, SUB_WIDTH, SUB_WIDTH]) for j in range(SUB2)]
        self.tower = [Mlp(f"tower.{t}", [SUB_WIDTH, TOWER_HIDDEN, 1], final_linear=True) for t in range(towers)]

    def init_params(self, rng):
        params = ParameterSet()
        self._init_embeddings(params, rng)
        limit = np.sqrt(3.0 / self.input_dim)
        params["fgate.Wg"] = rng.uniform(-limit, limit, (self.input_dim, self.input_dim))
        self.shared.init(params, rng)
        for mlp in (*self.sub1, *self.sub2, *self.tower):
            mlp.init(params, rng)
        # heads start near 0.12 so t1 + t2 begins well inside (0, 1)
        for t in range(self.towers):
            params[f"tower.{t}.b1"] = np.full((1, 1), TOWER_BIAS_INIT)
        params["route1.r"] = np.ones((SUB1, SUB2))
        params["route2.r"] = np.ones((SUB2, self.towers))
        params["route1.log_alpha"] = np.full((SUB1, SUB2), self.log_alpha_init)
        params["route2.log_alpha"] = np.full((SUB2, self.towers), self.log_alpha_init)
        return params

    def draw_noise(self, rng):
        from .numerics import open_uniform

        return {
            "route1": open_uniform(rng, (SUB1, SUB2)),
            "route2": open_uniform(rng, (SUB2, self.towers)),
        }

    def _gated(self, name: str) -> bool:
        return name == "route1" or self.gate_placement == "routing_and_towers"

    def _gates(self, params, name: str, noise, mode: str):
        la = params[f"{name}.log_alpha"]
        if not self._gated(name):
            return np.ones_like(la), np.zeros_like(la)
        if mode == "train":
            if noise is None:
                raise ValueError("train mode needs frozen gate noise")
            gs = hc_sample(la, self.hc, noise[name])
            return gs.z, gs.dz_dlog_alpha
        if mode == "eval":
            return hc_test_gate(la, self.hc), np.zeros_like(la)
        if mode == "open":
            return np.ones_like(la), np.zeros_like(la)
        raise ValueError(f"unknown gate mode {mode!r}")

    def forward(self, params, features, noise=None, mode="eval"):
        E, ids = self._embed(params, features)
        if mode == "open":
            Eg, g = E, None
        else:
            Eg, g = feature_gate(E, params["fgate.Wg"])
        h0, acts0 = self.shared.forward(params, Eg)
        sub1 = [m.forward(params, h0) for m in self.sub1]
        O1 = np.stack([o for o, _ in sub1])
        z1, dz1 = self._gates(params, "route1", noise, mode)
        w1, a1, den1 = route_weights(params["route1.r"], z1)
        in2 = route(w1, O1)
        sub2 = [m.forward(params, in2[j]) for j, m in enumerate(self.sub2)]
        O2 = np.stack([o for o, _ in sub2])
        z2, dz2 = self._gates(params, "route2", noise, mode)
        w2, a2, den2 = route_weights(params["route2.r"], z2)
        in_t = route(w2, O2)
        tw = [m.forward(params, in_t[t]) for t, m in enumerate(self.tower)]
        probs = [np.asarray(sigmoid(o[:, 0])) for o, _ in tw]
        heads = Heads(*probs, clamp_etr=True)
        cache = dict(
            ids=ids, E=E, g=g, acts0=acts0, sub1=sub1, O1=O1, z1=z1, dz1=dz1, w1=w1, a1=a1, den1=den1,
            sub2=sub2, O2=O2, z2=z2, dz2=dz2, w2=w2, a2=a2, den2=den2, tw=tw, probs=probs, mode=mode,
        )
        return heads, cache

    def gates_l0(self, params) -> float:
        """Expected number of active gates."""
        return float(
            sum(hc_expected_l0(params[f"{n}.log_alpha"], self.hc).sum() for n in ("route1", "route2") if self._gated(n))
        )

    def head_targets(self, batch: CascadeData) -> list[np.ndarray]:
        y5 = batch.y5.astype(np.float64)
        if self.towers == 3:
            return [1.0 - y5]
        imply_s3 = ((batch.y5 == 0) & (batch.deepest_stage >= 3)).astype(np.float64)
        imply_s2 = (batch.deepest_stage == 2).astype(np.float64)
        return [imply_s3, imply_s2]

    def loss_and_grad(self, params, batch, noise=None, mode: str = "train"):
        check_labels(batch.y5, batch.y6)
        heads, c = self.forward(params, batch.features, noise, mode)
        n = len(batch)
        probs = c["probs"]
        t1, t2 = probs[0], probs[1]
        y5 = batch.y5.astype(np.float64)
        y6 = batch.y6.astype(np.float64)
        etr_raw = t1 + t2
        etr = clamp_prob(etr_raw)
        per = bce_loss(y6, t1) + bce_loss(y5, etr)
        targets = self.head_targets(batch)
        for k, y in enumerate(targets):
            per = per + bce_loss(y, probs[2 + k])
        l0 = self.gates_l0(params)
        loss = float(np.mean(per) + self.l0_lambda * l0)

        clipped = (etr_raw < PROB_EPS) | (etr_raw > 1.0 - PROB_EPS)
        g_etr = np.where(clipped, 0.0, -y5 / etr + (1.0 - y5) / (1.0 - etr))
        dprob = [bce_grad(y6, t1) + g_etr, g_etr] + [bce_grad(y, probs[2 + k]) for k, y in enumerate(targets)]

        grads = params.zeros_like()
        d_in_t = np.empty((self.towers, n, SUB_WIDTH))
        for t, m in enumerate(self.tower):
            p = probs[t]
            dlogit = (dprob[t] * p * (1.0 - p))[:, None] / n
            d_in_t[t] = m.backward(params, grads, c["tw"][t][1], dlogit)

        dO2, dw2 = route_backward(c["w2"], c["O2"], d_in_t)
        self._route_param_grads(params, grads, "route2", dw2, c["a2"], c["den2"], c["z2"], c["dz2"])
        d_in2 = np.empty((SUB2, n, SUB_WIDTH))
        for j, m in enumerate(self.sub2):
            d_in2[j] = m.backward(params, grads, c["sub2"][j][1], dO2[j])
        dO1, dw1 = route_backward(c["w1"], c["O1"], d_in2)
        self._route_param_grads(params, grads, "route1", dw1, c["a1"], c["den1"], c["z1"], c["dz1"])
        dh0 = np.zeros((n, SHARED_WIDTH))
        for i, m in enumerate(self.sub1):
            dh0 += m.backward(params, grads, c["sub1"][i][1], dO1[i])
        dEg = self.shared.backward(params, grads, c["acts0"], dh0)
        if c["g"] is None:
            dE = dEg
        else:
            dE, dWg = feature_gate_backward(c["E"], params["fgate.Wg"], c["g"], dEg)
            grads["fgate.Wg"] += dWg
        self._embed_backward(grads, c["ids"], dE)
        return loss, grads

    def _route_param_grads(self, params, grads, name, dw, a, denom, z, dz) -> None:
        da = route_weights_backward(dw, a, denom)
        grads[f"{name}.r"] += da * z
        grads[f"{name}.log_alpha"] += da * params[f"{name}.r"] * dz
        if self._gated(name):
            grads[f"{name}.log_alpha"] += self.l0_lambda * hc_expected_l0_grad(params[f"{name}.log_alpha"], self.hc)


class SharedMlp3Heads:
    """Plain shared-bottom MLP with three sigmoid heads, the degenerate limit of ECMM."""

    def __init__(self, ecmm: Ecmm):
        self.ecmm = ecmm

    def forward(self, params: Mapping[str, np.ndarray], features: np.ndarray) -> list[np.ndarray]:
        m = self.ecmm
        E, _ = m._embed(params, features)
        h0, _ = m.shared.forward(params, E)
        h1, _ = Mlp("block1", m.sub1[0].sizes).forward(params, h0)
        h2, _ = Mlp("block2", m.sub2[0].sizes).forward(params, h1)
        return [np.asarray(sigmoid(Mlp(f"tower.{t}", tw.sizes, True).forward(params, h2)[0][:, 0])) for t, tw in enumerate(m.tower)]

    def init_params(self, rng: np.random.Generator) -> ParameterSet:
        m = self.ecmm
        params = ParameterSet()
        m._init_embeddings(params, rng)
        m.shared.init(params, rng)
        Mlp("block1", m.sub1[0].sizes).init(params, rng)
        Mlp("block2", m.sub2[0].sizes).init(params, rng)
        for tw in m.tower:
            tw.init(params, rng)
        return params

    def to_ecmm_params(self, params: Mapping[str, np.ndarray]) -> ParameterSet:
        """Copy weights into an ECMM with identical sub-networks and uniform routing."""
        m = self.ecmm
        out = ParameterSet()
        for name in params:
            if name.startswith("block"):
                continue
            out[name] = params[name]
        for i in range(SUB1):
            for suffix in ("W0", "b0", "W1", "b1"):
                out[f"sub1.{i}.{suffix}"] = params[f"block1.{suffix}"]
        for j in range(SUB2):
            for suffix in ("W0", "b0", "W1", "b1"):
                out[f"sub2.{j}.{suffix}"] = params[f"block2.{suffix}"]
        out["fgate.Wg"] = np.zeros((m.input_dim, m.input_dim))
        out["route1.r"] = np.ones((SUB1, SUB2))
        out["route2.r"] = np.ones((SUB2, m.towers))
        out["route1.log_alpha"] = np.full((SUB1, SUB2), m.log_alpha_init)
        out["route2.log_alpha"] = np.full((SUB2, m.towers), m.log_alpha_init)
        return out


# ---------------------------------------------------------------------------


def ecmm_loss(t1, t2, t3, y5, y6, expected_l0: float = 0.0, l0_lambda: float = 0.0) -> float:
    """Per-sample ECMM objective: three independent BCE terms plus the L0 penalty."""
    check_labels(np.asarray(y5), np.asarray(y6))
    etr = clamp_prob(np.asarray(t1, dtype=np.float64) + np.asarray(t2, dtype=np.float64))
    y5 = np.asarray(y5, dtype=np.float64)
    per = bce_loss(y6, t1) + bce_loss(y5, etr) + bce_loss(1.0 - y5, t3)
    return float(np.mean(per) + l0_lambda * expected_l0)


def ecm_loss(logits, domain_tag) -> float:
    return float(np.mean(softmax_xent_loss(class_index(np.atleast_1d(domain_tag)), np.atleast_2d(logits))))


def rank_by_head(scores, item_ids) -> np.ndarray:
    """Item ids by descending score, ties by ascending item id."""
    scores = np.asarray(scores, dtype=np.float64)
    item_ids = np.asarray(item_ids)
    if len(item_ids) == 0:
        raise ValueError("rank_by_head: empty candidate set")
    return item_ids[np.lexsort((item_ids, -scores))]


def rank_candidates(model: Model, params, candidates: CascadeData, head: str = "t1") -> np.ndarray:
    if len(candidates) == 0:
        raise ValueError("rank_by_head: empty candidate set")
    return rank_by_head(model.predict(params, candidates.features).select(head), candidates.item_id)


MODEL_CLASSES = {
    "two_tower": TwoTower,
    "deep_baseline": DeepBaseline,
    "deep_baseline_softmax": DeepBaselineSoftmax,
    "ecm": Ecm,
    "esmm": Esmm,
    "ecmm": Ecmm,
}


def build_model(kind: str, vocab_sizes, fields, **kwargs) -> Model:
    try:
        cls = MODEL_CLASSES[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}") from None
    return cls(vocab_sizes, fields, **kwargs)
