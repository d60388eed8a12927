"""Linear-chain CRF over BIOES tags.

Exact log-likelihood via the forward algorithm, Viterbi decoding, and hard
transition constraints so that decoded sequences always parse back into
spans.  Constraints are applied in training (large negative penalty inside
the recursion) and in decoding, never serialized: they are derived from
the tag scheme.

The penalty is exact -inf in double precision and -1e4 in single
precision; exp(-1e4) underflows to zero in both, so partition values agree
with enumeration to machine precision while float32 training never sees a
NaN from inf arithmetic.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .corpus import TagScheme

HARD_PENALTY = -1e4  # finite stand-in for -inf where inf arithmetic is unsafe


class IllegalGoldSequence(ValueError):
    def __init__(self, position: int, reason: str):
        self.position = position
        super().__init__(f"position {position}: {reason}")


def bioes_constraints(scheme: TagScheme):
    """(transition, start, end) legality masks for a BIOES scheme.

    B-X and I-X may only continue with I-X/E-X of the same type; O, E and S
    may be followed by anything that opens fresh (O, B-*, S-*).  Sequences
    must start with O/B/S and end with O/E/S.
    """
    tags = scheme.tags
    n = len(tags)

    def prefix(t):
        return t[0] if t != "O" else "O"

    def etype(t):
        return t[2:] if t != "O" else None

    trans = np.zeros((n, n), dtype=bool)
    for i, ti in enumerate(tags):
        for j, tj in enumerate(tags):
            pi, pj = prefix(ti), prefix(tj)
            if pi in ("B", "I"):
                trans[i, j] = pj in ("I", "E") and etype(ti) == etype(tj)
            else:  # O, E, S close or stand alone
                trans[i, j] = pj in ("O", "B", "S")
    start = np.array([prefix(t) in ("O", "B", "S") for t in tags])
    end = np.array([prefix(t) in ("O", "E", "S") for t in tags])
    return trans, start, end


class CrfParams:
    """Trainable transition/start/end scores plus a fixed legality mask."""

    def __init__(self, n_tags: int, rng: np.random.Generator, dtype=np.float64,
                 constraints=None):
        self.n_tags = n_tags
        self.transitions = ad.Param(
            "crf_transitions", ad.glorot_uniform(rng, n_tags, n_tags, dtype)
        )
        self.start_scores = ad.Param(
            "crf_start", ad.glorot_uniform(rng, n_tags, 1, dtype).reshape(n_tags)
        )
        self.end_scores = ad.Param(
            "crf_end", ad.glorot_uniform(rng, n_tags, 1, dtype).reshape(n_tags)
        )
        if constraints is None:
            trans = np.ones((n_tags, n_tags), dtype=bool)
            start = np.ones(n_tags, dtype=bool)
            end = np.ones(n_tags, dtype=bool)
        else:
            trans, start, end = constraints
        self.trans_allowed = trans
        self.start_allowed = start
        self.end_allowed = end

    @property
    def params(self):
        return [self.transitions, self.start_scores, self.end_scores]

    def _penalty(self, dtype) -> float:
        return -np.inf if np.dtype(dtype) == np.float64 else HARD_PENALTY

    def masked_scores(self, penalty=None):
        """(transitions, start, end) with illegal entries pushed to the
        penalty value; gradient does not flow into masked cells."""
        pen = self._penalty(self.transitions.data.dtype) if penalty is None else penalty
        t = ad.masked_fill(self.transitions, ~self.trans_allowed, pen)
        s = ad.masked_fill(self.start_scores, ~self.start_allowed, pen)
        e = ad.masked_fill(self.end_scores, ~self.end_allowed, pen)
        return t, s, e

    def check_legal(self, tag_ids) -> None:
        if len(tag_ids) == 0:
            raise IllegalGoldSequence(0, "empty tag sequence")
        if not self.start_allowed[tag_ids[0]]:
            raise IllegalGoldSequence(0, f"tag id {tag_ids[0]} cannot start")
        for i in range(1, len(tag_ids)):
            if not self.trans_allowed[tag_ids[i - 1], tag_ids[i]]:
                raise IllegalGoldSequence(
                    i, f"transition {tag_ids[i - 1]} -> {tag_ids[i]} is illegal"
                )
        if not self.end_allowed[tag_ids[-1]]:
            raise IllegalGoldSequence(
                len(tag_ids) - 1, f"tag id {tag_ids[-1]} cannot end"
            )


def sequence_score(emissions, tag_ids, params: CrfParams) -> ad.Tensor:
    """Path score: emissions + transitions + start/end, as a graph scalar."""
    em = emissions if isinstance(emissions, ad.Tensor) else ad.Tensor(np.asarray(emissions))
    n, n_tags = em.shape
    dtype = em.dtype
    onehot = np.zeros((n, n_tags), dtype=dtype)
    onehot[np.arange(n), tag_ids] = 1.0
    start_sel = np.zeros(n_tags, dtype=dtype)
    start_sel[tag_ids[0]] = 1.0
    end_sel = np.zeros(n_tags, dtype=dtype)
    end_sel[tag_ids[-1]] = 1.0
    trans_count = np.zeros((n_tags, n_tags), dtype=dtype)
    for a, b in zip(tag_ids[:-1], tag_ids[1:]):
        trans_count[a, b] += 1.0
    score = ad.tsum(ad.mul(em, onehot))
    score = ad.add(score, ad.tsum(ad.mul(params.transitions, trans_count)))
    score = ad.add(score, ad.tsum(ad.mul(params.start_scores, start_sel)))
    score = ad.add(score, ad.tsum(ad.mul(params.end_scores, end_sel)))
    return score


def log_partition(emissions, params: CrfParams) -> ad.Tensor:
    """Forward-algorithm log Z over all mask-legal sequences."""
    em = emissions if isinstance(emissions, ad.Tensor) else ad.Tensor(np.asarray(emissions))
    n, n_tags = em.shape
    trans_m, start_m, end_m = params.masked_scores()
    alpha = ad.add(ad.embedding_lookup(em, np.array([0])), ad.reshape(start_m, (1, n_tags)))
    for i in range(1, n):
        prev = ad.reshape(alpha, (n_tags, 1))
        scores = ad.add(prev, trans_m)
        lse = ad.logsumexp(scores, axis=0, keepdims=True)
        alpha = ad.add(lse, ad.embedding_lookup(em, np.array([i])))
    final = ad.add(alpha, ad.reshape(end_m, (1, n_tags)))
    return ad.tsum(ad.logsumexp(final, axis=1))


def log_likelihood(emissions, gold, params: CrfParams) -> ad.Tensor:
    """log p(gold | emissions); always <= 0 for a legal gold sequence."""
    gold = np.asarray(gold, dtype=np.int64)
    params.check_legal(gold)
    return ad.sub(sequence_score(emissions, gold, params), log_partition(emissions, params))


def viterbi(emissions, params: CrfParams):
    """Highest-scoring legal sequence and its score.

    Pure numpy (no tape).  Ties break toward the lowest tag id because
    argmax returns the first maximizer.
    """
    em = np.asarray(emissions.data if isinstance(emissions, ad.Tensor) else emissions,
                    dtype=np.float64)
    n, n_tags = em.shape
    trans = np.where(params.trans_allowed, params.transitions.data, -np.inf)
    start = np.where(params.start_allowed, params.start_scores.data, -np.inf)
    end = np.where(params.end_allowed, params.end_scores.data, -np.inf)

    delta = em[0] + start
    back = np.zeros((n, n_tags), dtype=np.int64)
    for i in range(1, n):
        cand = delta[:, None] + trans  # (prev, next)
        best_prev = np.argmax(cand, axis=0)
        delta = cand[best_prev, np.arange(n_tags)] + em[i]
        back[i] = best_prev
    final = delta + end
    last = int(np.argmax(final))
    score = float(final[last])
    tags = [last]
    for i in range(n - 1, 0, -1):
        tags.append(int(back[i, tags[-1]]))
    tags.reverse()
    return tags, score


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(x - m).sum(axis=axis))


def packed_log_partition(em: ad.Tensor, trans_m: ad.Tensor, start_m: ad.Tensor,
                         end_m: ad.Tensor, idx: np.ndarray,
                         lengths: np.ndarray) -> ad.Tensor:
    """Sum of forward-algorithm log Z over a packed batch, as one fused op.

    ``idx[b, t]`` is the emission row of position t in sentence b (repeats
    of the last row past each length, which the recursion freezes out).
    The gradient is the classical forward-backward result: per-position
    tag marginals for emissions/start/end and summed pairwise marginals
    for the transitions.  All scores are finite (the -1e4 penalty), so
    plain max-subtracted logsumexp is safe in both precisions.
    """
    E = em.data[idx]  # (B, L, T)
    bsz, max_len, n_tags = E.shape
    trans = trans_m.data
    alphas = np.empty((max_len, bsz, n_tags), dtype=E.dtype)
    a = E[:, 0] + start_m.data
    alphas[0] = a
    for t in range(1, max_len):
        nxt = _lse(a[:, :, None] + trans[None], axis=1) + E[:, t]
        a = np.where((lengths > t)[:, None], nxt, a)
        alphas[t] = a
    log_z_vec = _lse(a + end_m.data, axis=1)  # (B,)

    def vjp(g):  # g: (B,)
        betas = np.empty_like(alphas)
        betas[max_len - 1] = end_m.data
        for t in range(max_len - 2, -1, -1):
            cand = _lse(trans[None] + (E[:, t + 1] + betas[t + 1])[:, None, :], axis=2)
            betas[t] = np.where((lengths - 1 == t)[:, None], end_m.data, cand)
        alive = (np.arange(max_len)[None, :] < lengths[:, None]).astype(E.dtype)
        # positional marginals, scaled by the incoming gradient
        post = np.exp(alphas.transpose(1, 0, 2) + betas.transpose(1, 0, 2)
                      - log_z_vec[:, None, None])
        post *= (alive * g[:, None])[:, :, None]
        g_em = np.zeros(em.shape, dtype=E.dtype)
        np.add.at(g_em, idx.reshape(-1), post.reshape(-1, n_tags))
        g_start = post[:, 0, :].sum(axis=0)
        g_end = post[np.arange(bsz), lengths - 1, :].sum(axis=0)
        g_trans = np.zeros_like(trans)
        for t in range(1, max_len):
            live = lengths > t
            if not live.any():
                break
            pair = np.exp(
                alphas[t - 1][:, :, None] + trans[None]
                + (E[:, t] + betas[t] - log_z_vec[:, None])[:, None, :]
            )
            g_trans += (pair * (live * g)[:, None, None]).sum(axis=0)
        return (g_em, g_trans, g_start, g_end)

    return ad.custom_op(log_z_vec, (em, trans_m, start_m, end_m), vjp)


def viterbi_batch(emissions_data: np.ndarray, rows_per_sentence,
                  params: CrfParams) -> list[list[int]]:
    """Viterbi over a packed batch; identical output to per-sentence
    decoding (first-maximizer tie-breaking is preserved lane-wise)."""
    lengths = np.array([len(r) for r in rows_per_sentence])
    bsz, max_len = len(lengths), int(lengths.max())
    n_tags = emissions_data.shape[1]
    idx = np.zeros((bsz, max_len), dtype=np.int64)
    for b, rows in enumerate(rows_per_sentence):
        idx[b, : lengths[b]] = rows
        idx[b, lengths[b] :] = rows[-1]
    E = np.asarray(emissions_data, dtype=np.float64)[idx]  # (B, L, T)
    trans = np.where(params.trans_allowed, params.transitions.data, -np.inf)
    start = np.where(params.start_allowed, params.start_scores.data, -np.inf)
    end = np.where(params.end_allowed, params.end_scores.data, -np.inf)

    delta = E[:, 0] + start
    back = np.zeros((max_len, bsz, n_tags), dtype=np.int64)
    for t in range(1, max_len):
        cand = delta[:, :, None] + trans[None]  # (B, prev, next)
        best_prev = np.argmax(cand, axis=1)
        nxt = np.take_along_axis(cand, best_prev[:, None, :], axis=1)[:, 0] + E[:, t]
        live = (lengths > t)[:, None]
        delta = np.where(live, nxt, delta)
        back[t] = best_prev
    final = delta + end
    last = np.argmax(final, axis=1)
    out = []
    for b in range(bsz):
        n = int(lengths[b])
        tags = [int(last[b])]
        for t in range(n - 1, 0, -1):
            tags.append(int(back[t, b, tags[-1]]))
        tags.reverse()
        out.append(tags)
    return out


def batch_nll(emissions, groups, params: CrfParams) -> ad.Tensor:
    """Mean negative log-likelihood over a batch.

    ``emissions`` holds stacked rows for several sentences; ``groups`` is a
    list of (row_indices, gold_ids) pairs, one per sentence.  Uses the
    finite penalty so both precisions share one code path.
    """
    em = emissions if isinstance(emissions, ad.Tensor) else ad.Tensor(np.asarray(emissions))
    n_tags = em.shape[1]
    dtype = em.dtype
    bsz = len(groups)
    lengths = np.array([len(rows) for rows, _ in groups])
    max_len = int(lengths.max())

    idx = np.zeros((bsz, max_len), dtype=np.int64)
    for b, (rows, _) in enumerate(groups):
        idx[b, : lengths[b]] = rows
        idx[b, lengths[b] :] = rows[-1]  # dummy, frozen out of the recursion

    trans_m, start_m, end_m = params.masked_scores(penalty=HARD_PENALTY)
    log_z = ad.tsum(packed_log_partition(em, trans_m, start_m, end_m, idx, lengths))

    # gold path scores, batched through constant selection matrices
    emit_sel = np.zeros(em.shape, dtype=dtype)
    trans_count = np.zeros((n_tags, n_tags), dtype=dtype)
    start_count = np.zeros(n_tags, dtype=dtype)
    end_count = np.zeros(n_tags, dtype=dtype)
    for rows, gold in groups:
        emit_sel[rows, gold] += 1.0
        start_count[gold[0]] += 1.0
        end_count[gold[-1]] += 1.0
        np.add.at(trans_count, (gold[:-1], gold[1:]), 1.0)
    gold_score = ad.tsum(ad.mul(em, emit_sel))
    gold_score = ad.add(gold_score, ad.tsum(ad.mul(params.transitions, trans_count)))
    gold_score = ad.add(gold_score, ad.tsum(ad.mul(params.start_scores, start_count)))
    gold_score = ad.add(gold_score, ad.tsum(ad.mul(params.end_scores, end_count)))

    return ad.scale(ad.sub(log_z, gold_score), 1.0 / bsz)
