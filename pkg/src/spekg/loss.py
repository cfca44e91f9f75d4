"""Noisy positive-unlabeled objective and label posteriors.

Scalar/array helpers operate on plain floats or numpy arrays; the
``batch_objective`` function builds the same quantities on a :class:`Tape`
for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import PROB_EPS, Tape, Tensor, logit, sigmoid


def _finite(name: str, *xs) -> None:
    for x in xs:
        if not np.all(np.isfinite(np.asarray(x, dtype=np.float64))):
            raise ValueError(f"{name}: non-finite input")


def _clip(p):
    out = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return float(out) if out.ndim == 0 else out


def collection_prob(psi):
    """Probability of a triple being collected given its score."""
    _finite("collection_prob", psi)
    return _clip(sigmoid(psi))


def pairwise_uncollection(psi_u, psi_l):
    """Pairwise stand-in for the uncollection probability of ``s_u``.

    ``sigmoid(psi_l - psi_u)``: large when the collected triple outscores its
    corruption, i.e. when the corruption is "more uncollected" than the
    collected triple.
    """
    _finite("pairwise_uncollection", psi_u, psi_l)
    return _clip(sigmoid(np.asarray(psi_l, dtype=np.float64) - np.asarray(psi_u, dtype=np.float64)))


def _mixture_posterior(prior, p1, p0):
    p1 = np.asarray(p1, dtype=np.float64)
    p0 = np.asarray(p0, dtype=np.float64)
    num = prior * p1
    den = num + (1.0 - prior) * p0
    out = np.where(den > 0, num / np.maximum(den, PROB_EPS * PROB_EPS), 0.0)
    return float(out) if out.ndim == 0 else out


def posterior_labeled(phi1_l, phi0_l, beta: float):
    """P(true | collected) = b*phi1 / (b*phi1 + (1-b)*phi0)."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    return _mixture_posterior(beta, phi1_l, phi0_l)


def posterior_unlabeled(phi1_u, phi0_u, alpha: float):
    """P(true | uncollected) from the two uncollection probabilities."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return _mixture_posterior(alpha, phi1_u, phi0_u)


def triple_loss(phi1_l, phi0_l, phi1_star, phi0_star, w_l, w_u) -> float:
    """Weighted negative log-likelihood over B labeled triples and their K corruptions.

    ``phi*_l`` and ``w_l`` have shape (B,); ``phi*_star`` and ``w_u`` shape
    (B, K).  The labeled term enters once per corruption, so the whole double
    sum is divided by K*B.
    """
    phi1_l, phi0_l, w_l = (np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in (phi1_l, phi0_l, w_l))
    phi1_star, phi0_star, w_u = (
        np.asarray(x, dtype=np.float64).reshape(len(phi1_l), -1) for x in (phi1_star, phi0_star, w_u)
    )
    for p in (phi1_l, phi0_l, phi1_star, phi0_star):
        if np.any((p <= 0) | (p >= 1)):
            raise ValueError("triple_loss: probability outside (0, 1)")
    labeled = w_l * np.log(phi1_l) + (1 - w_l) * np.log(phi0_l)
    unlabeled = w_u * np.log(phi1_star) + (1 - w_u) * np.log(phi0_star)
    k = unlabeled.shape[1]
    total = k * labeled.sum() + unlabeled.sum()
    return float(-total / (k * len(labeled)))


def bernoulli_kl(w, w_tilde):
    """Elementwise KL(Bern(w) || Bern(w_tilde))."""
    w = _clip(w)
    wt = _clip(w_tilde)
    return w * np.log(w / wt) + (1 - w) * np.log((1 - w) / (1 - wt))


def kl_term(w_l, wt_l, w_u=None, wt_u=None) -> float:
    """Mean Bernoulli KL of each table, summed over the tables given."""
    out = float(np.mean(bernoulli_kl(w_l, wt_l)))
    if w_u is not None:
        out += float(np.mean(bernoulli_kl(w_u, wt_u)))
    return out


def reg_term(w_l, w_u) -> float:
    """L1 norm of each posterior table divided by its size."""
    w_l = np.asarray(w_l, dtype=np.float64)
    w_u = np.asarray(w_u, dtype=np.float64)
    return float(np.abs(w_l).mean() + np.abs(w_u).mean())


def total_loss(triple, kl, reg, lambda_kl: float = 1.0, lambda_reg: float = 1.0) -> float:
    for name, v in (("triple", triple), ("kl", kl), ("reg", reg)):
        if not np.isfinite(v):
            raise FloatingPointError(f"loss component {name!r} is not finite: {v}")
    return float(triple + lambda_kl * kl + lambda_reg * reg)


# -- tape version -----------------------------------------------------------


def _pair_logit(tape: Tape, psi_u: Tensor, psi_l: Tensor) -> Tensor:
    # psi_l broadcast over the K corruptions of each labeled triple
    return tape.sub(tape.reshape(psi_l, (-1, 1)), psi_u)


def _tape_kl(tape: Tape, w_logit: Tensor, w_tilde: np.ndarray) -> Tensor:
    w = tape.sigmoid(w_logit)
    not_w = tape.sigmoid(tape.scale(w_logit, -1.0))
    wt = np.clip(w_tilde, PROB_EPS, 1.0 - PROB_EPS)
    pos = tape.mul(w, tape.sub(tape.log(w), np.log(wt)))
    neg = tape.mul(not_w, tape.sub(tape.log(not_w), np.log1p(-wt)))
    return tape.mean(tape.add(pos, neg))


def batch_objective(
    tape: Tape,
    psi1_l: Tensor,
    psi0_l: Tensor,
    psi1_u: Tensor,
    psi0_u: Tensor,
    wl_logit: Tensor,
    wu_logit: Tensor,
    wl_tilde: np.ndarray,
    wu_tilde: np.ndarray,
    lambda_kl: float = 1.0,
    lambda_reg: float = 1.0,
) -> dict[str, Tensor]:
    """Triple, KL and regularisation terms plus their weighted total.

    Shapes: labeled scores and ``wl_*`` are (B,); unlabeled scores and
    ``wu_*`` are (B, K).  Free posteriors enter as logits.
    """
    w_l = tape.sigmoid(wl_logit)
    not_w_l = tape.sigmoid(tape.scale(wl_logit, -1.0))
    w_u = tape.sigmoid(wu_logit)
    not_w_u = tape.sigmoid(tape.scale(wu_logit, -1.0))

    labeled = tape.add(
        tape.mul(w_l, tape.log(tape.sigmoid(psi1_l))),
        tape.mul(not_w_l, tape.log(tape.sigmoid(psi0_l))),
    )
    unlabeled = tape.add(
        tape.mul(w_u, tape.log(tape.sigmoid(_pair_logit(tape, psi1_u, psi1_l)))),
        tape.mul(not_w_u, tape.log(tape.sigmoid(_pair_logit(tape, psi0_u, psi0_l)))),
    )
    triple = tape.scale(tape.add(tape.mean(labeled), tape.mean(unlabeled)), -1.0)
    kl = tape.add(_tape_kl(tape, wl_logit, wl_tilde), _tape_kl(tape, wu_logit, wu_tilde))
    reg = tape.add(tape.mean(w_l), tape.mean(w_u))
    total = tape.add(triple, tape.add(tape.scale(kl, lambda_kl), tape.scale(reg, lambda_reg)))
    for name, t in (("triple", triple), ("kl", kl), ("reg", reg)):
        if not np.isfinite(t.data):
            raise FloatingPointError(f"loss component {name!r} is not finite")
    return {"triple": triple, "kl": kl, "reg": reg, "total": total}


@dataclass
class PosteriorTable:
    """Free posteriors (as logits) and cached model posteriors.

    ``wl_*`` hold one entry per labeled triple; ``wu_*`` one entry per
    unlabeled slot, shape (n_labeled, K).
    """

    wl_logit: np.ndarray
    wu_logit: np.ndarray
    wl_tilde: np.ndarray
    wu_tilde: np.ndarray
    alpha: float
    beta: float

    @classmethod
    def from_scores(cls, psi1_l, psi0_l, psi1_u, psi0_u, alpha: float, beta: float) -> PosteriorTable:
        """Start the free parameters at the model posterior."""
        table = cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), alpha, beta)
        table.refresh(psi1_l, psi0_l, psi1_u, psi0_u)
        table.wl_logit = logit(table.wl_tilde)
        table.wu_logit = logit(table.wu_tilde)
        return table

    @property
    def w_labeled(self) -> np.ndarray:
        return sigmoid(self.wl_logit)

    @property
    def w_unlabeled(self) -> np.ndarray:
        return sigmoid(self.wu_logit)

    def labeled_posterior(self, psi1, psi0) -> np.ndarray:
        return np.atleast_1d(posterior_labeled(collection_prob(psi1), collection_prob(psi0), self.beta))

    def unlabeled_posterior(self, psi1, psi0) -> np.ndarray:
        # 1 - sigmoid(psi) == sigmoid(-psi), without cancellation
        phi1_u = _clip(sigmoid(-np.asarray(psi1, dtype=np.float64)))
        phi0_u = _clip(sigmoid(-np.asarray(psi0, dtype=np.float64)))
        return np.asarray(posterior_unlabeled(phi1_u, phi0_u, self.alpha))

    def refresh(self, psi1_l, psi0_l, psi1_u, psi0_u) -> None:
        """Recompute both cached tables; each is swapped in whole."""
        wl = self.labeled_posterior(psi1_l, psi0_l)
        wu = self.unlabeled_posterior(psi1_u, psi0_u).reshape(np.shape(psi1_u))
        self.wl_tilde, self.wu_tilde = wl, wu

    def dump(self, path, header: str = "") -> None:
        """TSV of ``triple_id, w, w_tilde, kind``; unlabeled ids are ``i*K + k``."""
        with open(path, "w", encoding="utf-8") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write("# triple_id\tw\tw_tilde\tkind\n")
            for i, (w, wt) in enumerate(zip(self.w_labeled, self.wl_tilde)):
                fh.write(f"{i}\t{float(w)!r}\t{float(wt)!r}\tlabeled\n")
            for i, (w, wt) in enumerate(zip(self.w_unlabeled.reshape(-1), self.wu_tilde.reshape(-1))):
                fh.write(f"{i}\t{float(w)!r}\t{float(wt)!r}\tunlabeled\n")


def read_posterior_dump(path):
    """Parse a dump back into ``{"labeled": (w, w_tilde), "unlabeled": (w, w_tilde)}``."""
    out = {"labeled": ([], []), "unlabeled": ([], [])}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            _, w, wt, kind = line.rstrip("\n").split("\t")
            out[kind][0].append(float(w))
            out[kind][1].append(float(wt))
    return {k: (np.asarray(a), np.asarray(b)) for k, (a, b) in out.items()}
