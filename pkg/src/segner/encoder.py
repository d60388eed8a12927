"""Three-step sequence encoder: candidacy embedding, position-selective
attention over a convolution bank, and adaptive fusion of directional
subword convolutions.

Step 1 adds a projected 4-bit candidacy vector to each character
embedding.  Step 2 runs character convolutions of window 2..5 and turns
them into a per-character distribution over the four word positions.
Step 3 convolves left/right subword windows around each character and
fuses the seven resulting features, weighted by attention conditioned on
the position distribution.  The fused word vector joins the convolution
features to produce per-tag emission scores for the CRF.

All convolutions zero-pad outside the sequence.  For speed, batches are
packed into one row-stacked matrix with 4 zero "gap" rows between
sentences (window length is at most 5, so gaps isolate neighbors exactly
like per-sentence zero padding).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

WINDOW_LENGTHS = (2, 3, 4, 5)
SUBWORD_REACH = 3  # words cap at 4 chars, so a character sees at most 3 neighbors
N_SUBWORD_FEATURES = 2 * SUBWORD_REACH + 1
GAP_ROWS = max(WINDOW_LENGTHS) - 1

ABLATION_LEVELS = ("baseline", "+CPE", "+PSA", "+AWC")
_ABLATION_ALIASES = {
    "baseline": 0,
    "+cpe": 1, "cpe": 1,
    "+psa": 2, "psa": 2,
    "+awc": 3, "awc": 3,
}


def ablation_rank(name: str) -> int:
    try:
        return _ABLATION_ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(
            f"unknown ablation {name!r}; expected one of {ABLATION_LEVELS}"
        ) from None


@dataclass
class EncoderConfig:
    d_e: int = 100  # character embedding dim
    d_p: int = 100  # candidacy projection dim; the step-1 addition needs d_p == d_e
    n_filters: int = 100  # filters per convolution window
    windows: tuple = WINDOW_LENGTHS
    d_w: int = 100  # subword feature dim; the step-3 addition needs d_w == d_e
    d_v: int = 25  # unused knob, kept so configs carry it unchanged
    dropout: float = 0.5

    def __post_init__(self):
        self.windows = tuple(self.windows)
        if self.windows != WINDOW_LENGTHS:
            raise ValueError(f"windows must be {WINDOW_LENGTHS}, got {self.windows}")
        if min(self.d_e, self.d_p, self.n_filters, self.d_w) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.d_p != self.d_e:
            raise ValueError("d_p must equal d_e (candidacy projection is added "
                             "elementwise to the character embedding)")
        if self.d_w != self.d_e:
            raise ValueError("d_w must equal d_e (subword features are added to "
                             "the projected position vector)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")

    @property
    def h_dim(self) -> int:
        return len(self.windows) * self.n_filters

    def to_dict(self) -> dict:
        return {
            "d_e": self.d_e, "d_p": self.d_p, "n_filters": self.n_filters,
            "windows": list(self.windows), "d_w": self.d_w, "d_v": self.d_v,
            "dropout": self.dropout,
        }


class EncoderParams:
    """All trainable tensors of the encoder, created in a fixed order."""

    def __init__(self, embed_matrix: np.ndarray, n_tags: int,
                 config: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float64):
        c = config
        self.config = c
        self.n_tags = n_tags
        g = lambda fi, fo: ad.glorot_uniform(rng, fi, fo, dtype)

        self.char_embed = ad.Param("char_embed", np.asarray(embed_matrix, dtype=dtype))
        self.cand_proj = ad.Param("cand_proj", g(4, c.d_e))
        self.conv_w, self.conv_b = {}, {}
        for l in c.windows:
            self.conv_w[l] = ad.Param(f"conv{l}_w", g(l * c.d_e, c.n_filters))
            self.conv_b[l] = ad.Param(f"conv{l}_b", np.zeros(c.n_filters, dtype=dtype))
        self.pos_attn_w = ad.Param("pos_attn_w", g(c.h_dim, 4))
        self.pos_feat_proj = ad.Param("pos_feat_proj", g(4, c.d_e))
        self.subw_back_w, self.subw_back_b = {}, {}
        for k in range(SUBWORD_REACH + 1):
            self.subw_back_w[k] = ad.Param(f"subw_back{k}_w", g((k + 1) * c.d_e, c.d_w))
            self.subw_back_b[k] = ad.Param(f"subw_back{k}_b", np.zeros(c.d_w, dtype=dtype))
        self.subw_fwd_w, self.subw_fwd_b = {}, {}
        for k in range(1, SUBWORD_REACH + 1):
            self.subw_fwd_w[k] = ad.Param(f"subw_fwd{k}_w", g((k + 1) * c.d_e, c.d_w))
            self.subw_fwd_b[k] = ad.Param(f"subw_fwd{k}_b", np.zeros(c.d_w, dtype=dtype))
        self.subw_score_w = ad.Param("subw_score_w", g(c.d_w, 1))
        self.emit_w = ad.Param("emit_w", g(c.h_dim + c.d_w, n_tags))

    @property
    def params(self) -> list:
        out = [self.char_embed, self.cand_proj]
        for l in self.config.windows:
            out += [self.conv_w[l], self.conv_b[l]]
        out += [self.pos_attn_w, self.pos_feat_proj]
        for k in sorted(self.subw_back_w):
            out += [self.subw_back_w[k], self.subw_back_b[k]]
        for k in sorted(self.subw_fwd_w):
            out += [self.subw_fwd_w[k], self.subw_fwd_b[k]]
        out += [self.subw_score_w, self.emit_w]
        return out

    @property
    def dtype(self):
        return self.char_embed.data.dtype


def _windowed(x: ad.Tensor, shifts) -> ad.Tensor:
    """Row i holds [x_{i+s} for s in shifts], zero-padded out of bounds."""
    return ad.stack_windows(x, shifts)


def step1_compose(char_ids, cand_pos, params: EncoderParams,
                  row_mask=None) -> ad.Tensor:
    """Character embedding plus projected candidacy: x_i = e_i + P c_i."""
    emb = ad.embedding_lookup(params.char_embed, np.asarray(char_ids, dtype=np.int64))
    if row_mask is not None:
        emb = ad.mul(emb, row_mask)
    cand = ad.Tensor(np.asarray(cand_pos, dtype=params.dtype))
    if cand.ndim != 2 or cand.shape != (emb.shape[0], 4):
        raise ad.ShapeMismatch("candidacy matrix", cand.shape, (emb.shape[0], 4))
    return ad.add(emb, ad.matmul(cand, params.cand_proj))


def step2_attend(x: ad.Tensor, params: EncoderParams):
    """Convolution bank h, position scores A, and position attention v."""
    hs = [
        ad.relu(ad.add(
            ad.matmul(_windowed(x, range(l)), params.conv_w[l]),
            params.conv_b[l],
        ))
        for l in params.config.windows
    ]
    h = ad.concat(hs, axis=1)
    a = ad.tanh(ad.matmul(h, params.pos_attn_w))
    v = ad.softmax(a, axis=1)
    return h, a, v


def step3_adapt(char_ids, v, params: EncoderParams, row_mask=None,
                fuse: str = "attention"):
    """Directional subword features fused into one word vector per char.

    Features are ordered [back3, back2, back1, self, fwd1, fwd2, fwd3]
    where back-k convolves z_{i-k}..z_i and fwd-k convolves z_i..z_{i+k}.
    ``fuse="attention"`` weights them by scores conditioned on v;
    ``fuse="mean"`` averages them (the pre-fusion ablation stage).
    """
    emb = ad.embedding_lookup(params.char_embed, np.asarray(char_ids, dtype=np.int64))
    if row_mask is not None:
        emb = ad.mul(emb, row_mask)
    v = v if isinstance(v, ad.Tensor) else ad.Tensor(np.asarray(v, dtype=params.dtype))
    proj_v = ad.matmul(v, params.pos_feat_proj)
    z = ad.add(emb, proj_v)
    if row_mask is not None:
        z = ad.mul(z, row_mask)

    feats = []
    for k in range(SUBWORD_REACH, 0, -1):  # back3, back2, back1
        win = _windowed(z, range(-k, 1))
        feats.append(ad.relu(ad.add(ad.matmul(win, params.subw_back_w[k]),
                                    params.subw_back_b[k])))
    feats.append(ad.relu(ad.add(ad.matmul(z, params.subw_back_w[0]),
                                params.subw_back_b[0])))
    for k in range(1, SUBWORD_REACH + 1):  # fwd1, fwd2, fwd3
        win = _windowed(z, range(0, k + 1))
        feats.append(ad.relu(ad.add(ad.matmul(win, params.subw_fwd_w[k]),
                                    params.subw_fwd_b[k])))

    n = z.shape[0]
    d_w = params.config.d_w
    f_stack = ad.reshape(ad.concat(feats, axis=1), (n, N_SUBWORD_FEATURES, d_w))
    if fuse == "attention":
        # one matmul scores all 7 features: tanh((F_if + proj_v_i) . s)
        pre = ad.add(f_stack, ad.reshape(proj_v, (n, 1, d_w)))
        flat = ad.reshape(pre, (n * N_SUBWORD_FEATURES, d_w))
        scores = ad.reshape(ad.tanh(ad.matmul(flat, params.subw_score_w)),
                            (n, N_SUBWORD_FEATURES))
        alpha = ad.softmax(scores, axis=1)
    elif fuse == "mean":
        alpha = ad.Tensor(np.full((n, N_SUBWORD_FEATURES),
                                  1.0 / N_SUBWORD_FEATURES, dtype=params.dtype))
    else:
        raise ValueError(f"unknown fuse mode {fuse!r}")
    w = ad.tsum(ad.mul(f_stack, ad.reshape(alpha, (n, N_SUBWORD_FEATURES, 1))), axis=1)
    return z, f_stack, alpha, w


def emissions(h, w, params: EncoderParams, use_word: bool = True,
              dropout_p: float = 0.0, train: bool = False, rng=None) -> ad.Tensor:
    """Per-tag scores from [h; w] (or h alone for the pre-fusion stages)."""
    h_dim = params.config.h_dim
    if use_word:
        pre = ad.concat([h, w], axis=1)
        emit = params.emit_w
    else:
        pre = h
        emit = ad.window_slice(params.emit_w, 0, h_dim)
    if dropout_p > 0.0:
        pre = ad.dropout(pre, dropout_p, train, rng)
    return ad.matmul(pre, emit)


@dataclass
class Packed:
    """Sentences stacked into one row matrix with zero gap rows between."""

    char_ids: np.ndarray  # (R,) int64, pad id at gap rows
    cand_pos: np.ndarray  # (R, 4), zero at gap rows
    row_mask: np.ndarray  # (R, 1), 1 at real rows
    offsets: np.ndarray  # (B,) first row of each sentence
    lengths: np.ndarray  # (B,)

    def rows(self, b: int) -> np.ndarray:
        return self.offsets[b] + np.arange(self.lengths[b])


def pack_sentences(items, dtype=np.float64) -> Packed:
    """items: list of (char_ids, cand_pos) arrays, one pair per sentence."""
    lengths = np.array([len(ids) for ids, _ in items], dtype=np.int64)
    total = int(lengths.sum()) + GAP_ROWS * max(len(items) - 1, 0)
    char_ids = np.zeros(total, dtype=np.int64)
    cand_pos = np.zeros((total, 4), dtype=dtype)
    row_mask = np.zeros((total, 1), dtype=dtype)
    offsets = np.zeros(len(items), dtype=np.int64)
    at = 0
    for b, (ids, cand) in enumerate(items):
        n = len(ids)
        offsets[b] = at
        char_ids[at : at + n] = ids
        cand_pos[at : at + n] = cand
        row_mask[at : at + n] = 1.0
        at += n + GAP_ROWS
    return Packed(char_ids, cand_pos, row_mask, offsets, lengths)


def pack_batch(batch, dtype=np.float64) -> Packed:
    """Strip a padded Batch back to ragged rows and pack it."""
    items = []
    for i in range(len(batch)):
        n = int(batch.lengths[i])
        items.append((batch.char_ids[i, :n], batch.cand_pos[i, :n]))
    return pack_sentences(items, dtype=dtype)


def forward_rows(packed: Packed, params: EncoderParams, level: int,
                 train: bool = False, rng=None, collect: bool = False):
    """Emission scores over packed rows at the given ablation level.

    level 0 zeroes the candidacy input; level >= 2 routes the position
    attention into the subword context; level 3 enables attention fusion
    and the word-vector path into the emissions.
    """
    cfg = params.config
    mask = packed.row_mask
    cand = packed.cand_pos if level >= 1 else np.zeros_like(packed.cand_pos)
    x = step1_compose(packed.char_ids, cand, params, row_mask=mask)
    x = ad.mul(x, mask)
    if cfg.dropout > 0.0:
        x = ad.dropout(x, cfg.dropout, train, rng)
    h, a, v = step2_attend(x, params)
    z = f_stack = alpha = w = None
    if level >= 3 or collect:  # below +AWC the word path never reaches the loss
        v_eff = v if level >= 2 else ad.Tensor(np.zeros(v.shape, dtype=params.dtype))
        z, f_stack, alpha, w = step3_adapt(
            packed.char_ids, v_eff, params, row_mask=mask,
            fuse="attention" if level >= 3 else "mean",
        )
    em = emissions(h, w, params, use_word=level >= 3,
                   dropout_p=cfg.dropout, train=train, rng=rng)
    if not collect:
        return em, None
    return em, {"x": x, "h": h, "A": a, "v": v, "z": z, "F": f_stack,
                "alpha": alpha, "w": w, "emissions": em}


@dataclass
class EncoderTrace:
    """Per-sentence intermediate activations, for inspection and tests."""

    x: np.ndarray
    h: np.ndarray
    A: np.ndarray
    v: np.ndarray
    z: np.ndarray
    F: np.ndarray
    alpha: np.ndarray
    w: np.ndarray
    emissions: np.ndarray
