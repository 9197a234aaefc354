"""Cross-model co-learning for test-time adaptation.

Implements the online learnable temperature, max-preserving logit
ensembling, the combined marginal-entropy / cross-model-distillation /
self-adaptation objective, an entropy-minimization single-model baseline,
optional entropy filtering, and a cascade for three or more models.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tape, Tensor
from .models import ModelHandle, cross_entropy_mean, forward_logits


@dataclass
class TauState:
    """Learnable temperature for scaling auxiliary logits."""
    tau: float = 1.0
    step_size: float = 1e-2
    steps: int = 5
    tau_min: float = 1e-2
    tau_max: float = 1e3
    logit_clamp: float = 20.0
    trajectory: list[float] = field(default_factory=list)

    def clamped(self, tau: float) -> float:
        return float(min(max(tau, self.tau_min), self.tau_max))


@dataclass
class FilterConfig:
    """EATA-style entropy filter: keep samples below threshold_factor * ln C."""
    enabled: bool = False
    threshold_factor: float = 0.4

    def threshold(self, num_classes: int) -> float:
        return self.threshold_factor * np.log(num_classes)


@dataclass
class LossMasks:
    sa: bool = True
    mar: bool = True
    ckd: bool = True


@dataclass
class EnsembleOutput:
    p_a: np.ndarray        # anchor logits (B, C)
    p_s: np.ndarray        # auxiliary logits (B, C)
    tau: float
    p_e_prime: np.ndarray  # p_a + p_s / tau
    T: np.ndarray          # per-sample balance factor (B,)
    p_e: np.ndarray        # p_e_prime / T
    y_hat: np.ndarray      # per-sample argmax of p_e
    aux_dropped: bool = False  # collapse guard fired; p_e falls back to p_a


@dataclass
class LossBreakdown:
    l_mar: float
    l_ckd: float
    l_sa: float
    l_total: float
    lam_col: float
    kept_frac: float = 1.0


def tau_discrepancy(p_a: np.ndarray, p_s_scaled: np.ndarray, clamp: float = 20.0) -> float:
    """Exponential-space L1 discrepancy, averaged over the batch.

    Logits are clipped to [-clamp, clamp] before exponentiation.
    """
    p_a = np.asarray(p_a, dtype=np.float64)
    p_s_scaled = np.asarray(p_s_scaled, dtype=np.float64)
    if p_a.shape != p_s_scaled.shape:
        raise ad.ShapeError(
            f"tau_discrepancy: shapes {p_a.shape} and {p_s_scaled.shape} differ")
    ea = np.exp(np.clip(p_a, -clamp, clamp))
    es = np.exp(np.clip(p_s_scaled, -clamp, clamp))
    return float(np.abs(ea - es).sum() / p_a.shape[0])


def _tau_grad(ea: np.ndarray, p_s: np.ndarray, tau: float, clamp: float) -> float:
    """d/dtau of the batch-mean discrepancy with clip treated as a hard gate."""
    scaled = p_s / tau
    inside = np.abs(scaled) < clamp
    es = np.exp(np.clip(scaled, -clamp, clamp))
    terms = np.sign(ea - es) * es * p_s * inside
    return float(terms.sum() / (tau * tau * ea.shape[0]))


def learn_tau(state: TauState, p_a: np.ndarray, p_s: np.ndarray) -> TauState:
    """Run K descent steps on tau against detached model outputs.

    The discrepancy gradient sets the move direction; the trial move is a
    trust-region step proportional to the current tau (scaled by
    step_size relative to its 1e-2 default) and is halved until the
    discrepancy decreases. Exponential-space gradients span many orders
    of magnitude, so a fixed-length gradient step either stalls or
    overshoots; the relative trust region keeps every step productive.
    """
    if state.steps < 0:
        raise ValueError("tau step count must be >= 0")
    p_a = np.asarray(p_a, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    if p_a.shape != p_s.shape:
        raise ad.ShapeError(f"learn_tau: shapes {p_a.shape} and {p_s.shape} differ")
    clamp = state.logit_clamp
    ea = np.exp(np.clip(p_a, -clamp, clamp))

    def loss(tau: float) -> float:
        es = np.exp(np.clip(p_s / tau, -clamp, clamp))
        return float(np.abs(ea - es).sum() / p_a.shape[0])

    trust = state.step_size / 1e-2  # default step_size gives a full-tau trust region
    tau = state.tau
    for _ in range(state.steps):
        g = _tau_grad(ea, p_s, tau, clamp)
        if g == 0.0:
            continue
        direction = -np.sign(g)
        delta = trust * (tau if direction > 0 else 0.5 * tau)
        cur = loss(tau)
        while delta > 1e-12 * tau:
            cand = state.clamped(tau + direction * delta)
            if loss(cand) < cur:
                tau = cand
                break
            delta *= 0.5
    state.tau = state.clamped(tau)
    state.trajectory.append(state.tau)
    return state


def ensemble(p_a: np.ndarray, p_s: np.ndarray, tau: float,
             mode: str = "max_preserving") -> EnsembleOutput:
    """Aggregate anchor and tau-scaled auxiliary logits.

    max_preserving divides by the per-sample balance factor
    T = max p_e' / max p_a so the maximum logit matches the anchor's;
    samples where either maximum is <= 0 fall back to T = 1. The
    "average" diagnostic mode divides by 2 instead.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    p_a = np.asarray(p_a, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    if p_a.shape != p_s.shape:
        raise ad.ShapeError(f"ensemble: shapes {p_a.shape} and {p_s.shape} differ")
    pe_prime = p_a + p_s / tau
    if mode == "average":
        T = np.full(p_a.shape[0], 2.0)
    elif mode == "max_preserving":
        max_a = p_a.max(axis=1)
        max_e = pe_prime.max(axis=1)
        T = np.where((max_a > 0) & (max_e > 0), max_e / np.where(max_a > 0, max_a, 1.0), 1.0)
    else:
        raise ValueError(f"unsupported ensemble mode: {mode!r}")
    p_e = pe_prime / T[:, None]
    y_hat = p_e.argmax(axis=1)
    return EnsembleOutput(p_a=p_a, p_s=p_s, tau=float(tau), p_e_prime=pe_prime,
                          T=T, p_e=p_e, y_hat=y_hat)


def agreement_rate(p_a: np.ndarray, p_s: np.ndarray) -> float:
    """Fraction of samples on which the two models' argmax predictions agree."""
    return float((np.asarray(p_a).argmax(axis=1) == np.asarray(p_s).argmax(axis=1)).mean())


def drop_auxiliary(ens: EnsembleOutput) -> EnsembleOutput:
    """Replace the ensemble with the anchor alone, keeping tau intact.

    Used when the auxiliary's predictions have diverged so far from the
    anchor's (e.g. batch-statistic collapse under a label-sorted stream)
    that its logits carry no usable signal: predictions and the
    collaborative losses fall back to the anchor, while the pseudo-labels
    keep pulling the auxiliary back toward agreement.
    """
    ones = np.ones(ens.p_a.shape[0])
    return EnsembleOutput(p_a=ens.p_a, p_s=ens.p_s, tau=ens.tau,
                          p_e_prime=ens.p_a, T=ones, p_e=ens.p_a,
                          y_hat=ens.p_a.argmax(axis=1), aux_dropped=True)


def entropy_rows(logits) -> Tensor:
    """Per-sample Shannon entropy of softmax(logits), differentiable."""
    t = logits if isinstance(logits, Tensor) else Tensor(logits)
    lse = ad.logsumexp(t)
    q = ad.softmax(t)
    qp = ad.tensor_sum(ad.mul(q, t), axis=-1)
    return ad.sub(lse, qp)


def marginal_entropy(p_e) -> Tensor:
    """Batch-mean entropy of the softmaxed ensemble logits."""
    return ad.tensor_mean(entropy_rows(p_e))


def self_adapt_loss(p_a, p_s) -> Tensor:
    """Sum of each model's mean prediction entropy."""
    return ad.add(ad.tensor_mean(entropy_rows(p_a)), ad.tensor_mean(entropy_rows(p_s)))


def ckd_loss(p_a, p_s, y_hat: np.ndarray) -> Tensor:
    """Cross-entropy of both models against the ensemble pseudo-labels."""
    a = p_a if isinstance(p_a, Tensor) else Tensor(p_a)
    s = p_s if isinstance(p_s, Tensor) else Tensor(p_s)
    return ad.add(cross_entropy_mean(a, y_hat), cross_entropy_mean(s, y_hat))


def _masked_mean(rows: Tensor, keep: np.ndarray) -> Tensor:
    kept = int(keep.sum())
    picked = ad.tensor_sum(ad.mul(rows, keep.astype(np.float64)))
    return ad.scalar_div(picked, kept)


def _cross_entropy_rows(logits: Tensor, labels: np.ndarray) -> Tensor:
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    lse = ad.logsumexp(logits)
    picked = ad.tensor_sum(ad.mul(logits, onehot), axis=-1)
    return ad.sub(lse, picked)


def _combined_loss(p_a_t: Tensor, p_s_t: Tensor, ens: EnsembleOutput,
                   keep: np.ndarray, lam_col: float, masks: LossMasks
                   ) -> tuple[Tensor, LossBreakdown]:
    """Masked-mean COCA objective over kept samples, on the active tape."""
    if ens.aux_dropped:
        pe_t = p_a_t
    else:
        scale = 1.0 / ens.T[:, None]  # balance factor is constant for model gradients
        pe_t = ad.mul(ad.add(p_a_t, ad.scalar_div(p_s_t, ens.tau)), scale)

    l_mar = _masked_mean(entropy_rows(pe_t), keep)
    ckd_rows = ad.add(_cross_entropy_rows(p_a_t, ens.y_hat),
                      _cross_entropy_rows(p_s_t, ens.y_hat))
    l_ckd = _masked_mean(ckd_rows, keep)
    l_sa = ad.add(_masked_mean(entropy_rows(p_a_t), keep),
                  _masked_mean(entropy_rows(p_s_t), keep))

    zero = Tensor(0.0)
    col = ad.add(l_mar if masks.mar else zero, l_ckd if masks.ckd else zero)
    total = ad.add(ad.mul(Tensor(lam_col), col), l_sa if masks.sa else zero)
    breakdown = LossBreakdown(
        l_mar=l_mar.item(), l_ckd=l_ckd.item(), l_sa=l_sa.item(),
        l_total=total.item(), lam_col=lam_col,
        kept_frac=float(keep.mean()))
    return total, breakdown


def coca_step(anchor: ModelHandle, auxiliary: ModelHandle, tau_state: TauState,
              batch: np.ndarray, optimizers: Sequence[SGD],
              filter_cfg: Optional[FilterConfig] = None, lam_col: float = 1.0,
              masks: Optional[LossMasks] = None,
              collapse_threshold: float = 0.0
              ) -> tuple[EnsembleOutput, LossBreakdown]:
    """One online co-adaptation step on an unlabeled batch.

    Reported predictions come from the forward pass before the update;
    the updated parameters first affect the next batch. When
    collapse_threshold > 0 and the two models agree on fewer than that
    fraction of the batch, the auxiliary is treated as collapsed and the
    ensemble falls back to the anchor for that batch.
    """
    filter_cfg = filter_cfg or FilterConfig(enabled=False)
    masks = masks or LossMasks()
    with Tape():
        p_a_t = forward_logits(anchor, Tensor(batch))
        p_s_t = forward_logits(auxiliary, Tensor(batch))

        learn_tau(tau_state, p_a_t.data, p_s_t.data)
        ens = ensemble(p_a_t.data, p_s_t.data, tau_state.tau)
        if collapse_threshold > 0 and agreement_rate(
                p_a_t.data, p_s_t.data) < collapse_threshold:
            ens = drop_auxiliary(ens)

        num_classes = ens.p_e.shape[1]
        if filter_cfg.enabled:
            # constant inputs record nothing on the tape
            h = entropy_rows(ens.p_e).data
            keep = h < filter_cfg.threshold(num_classes)
        else:
            keep = np.ones(len(batch), dtype=bool)

        if not keep.any():
            return ens, LossBreakdown(0.0, 0.0, 0.0, 0.0, lam_col, kept_frac=0.0)

        total, breakdown = _combined_loss(p_a_t, p_s_t, ens, keep, lam_col, masks)
        ad.backward(total)
    for opt in optimizers:
        opt.step()
    return ens, breakdown


def tent_step(model: ModelHandle, batch: np.ndarray, optimizer: SGD) -> np.ndarray:
    """Entropy-minimization baseline step; returns pre-update predictions."""
    with Tape():
        logits = forward_logits(model, Tensor(batch))
        loss = ad.tensor_mean(entropy_rows(logits))
        ad.backward(loss)
    optimizer.step()
    return logits.data.argmax(axis=1)


@dataclass
class CascadeOutput:
    per_model_preds: list[np.ndarray]  # aligned with the descending model order
    y_hat: np.ndarray                  # topmost combined prediction
    taus: list[float]                  # per-pairing tau, innermost first
    breakdown: LossBreakdown           # summed over pairing levels


def multi_model_step(models_desc: Sequence[ModelHandle],
                     tau_states: Sequence[TauState], batch: np.ndarray,
                     optimizers: Sequence[SGD],
                     filter_cfg: Optional[FilterConfig] = None,
                     lam_col: float = 1.0,
                     masks: Optional[LossMasks] = None,
                     collapse_threshold: float = 0.0) -> CascadeOutput:
    """Nested co-adaptation for >= 3 models ranked descending by size.

    The two smallest models form the innermost pair; each pairing's
    ensemble serves as the auxiliary against the next-larger model with
    its own temperature. All models update from the sum of the pairing
    losses.
    """
    k = len(models_desc)
    if k < 3:
        raise ValueError("multi_model_step requires >= 3 models; use coca_step for 2")
    if len(tau_states) != k - 1:
        raise ValueError(f"expected {k - 1} tau states, got {len(tau_states)}")
    filter_cfg = filter_cfg or FilterConfig(enabled=False)
    masks = masks or LossMasks()

    with Tape():
        logits = [forward_logits(m, Tensor(batch)) for m in models_desc]

        # build pairings bottom-up: innermost is (M_{k-1} anchor, M_k auxiliary)
        aux_t = logits[-1]
        aux_np = logits[-1].data
        levels = []  # (anchor_t, aux_t, EnsembleOutput)
        for level, i in enumerate(range(k - 2, -1, -1)):
            state = tau_states[level]
            anchor_t = logits[i]
            learn_tau(state, anchor_t.data, aux_np)
            ens = ensemble(anchor_t.data, aux_np, state.tau)
            if collapse_threshold > 0 and agreement_rate(
                    anchor_t.data, aux_np) < collapse_threshold:
                ens = drop_auxiliary(ens)
            levels.append((anchor_t, aux_t, ens))
            if ens.aux_dropped:
                aux_t = anchor_t
            else:
                scale = 1.0 / ens.T[:, None]
                aux_t = ad.mul(ad.add(anchor_t, ad.scalar_div(aux_t, state.tau)), scale)
            aux_np = ens.p_e

        top = levels[-1][2]
        num_classes = top.p_e.shape[1]
        if filter_cfg.enabled:
            h = entropy_rows(top.p_e).data
            keep = h < filter_cfg.threshold(num_classes)
        else:
            keep = np.ones(len(batch), dtype=bool)

        preds = [lg.data.argmax(axis=1) for lg in logits]
        taus = [s.tau for s in tau_states]
        if not keep.any():
            return CascadeOutput(preds, top.y_hat, taus,
                                 LossBreakdown(0.0, 0.0, 0.0, 0.0, lam_col, kept_frac=0.0))

        total = None
        agg = LossBreakdown(0.0, 0.0, 0.0, 0.0, lam_col, kept_frac=float(keep.mean()))
        for anchor_t, pair_aux_t, ens in levels:
            lvl_total, lvl = _combined_loss(anchor_t, pair_aux_t, ens, keep, lam_col, masks)
            total = lvl_total if total is None else ad.add(total, lvl_total)
            agg.l_mar += lvl.l_mar
            agg.l_ckd += lvl.l_ckd
            agg.l_sa += lvl.l_sa
            agg.l_total += lvl.l_total
        ad.backward(total)
    for opt in optimizers:
        opt.step()
    return CascadeOutput(preds, top.y_hat, taus, agg)
