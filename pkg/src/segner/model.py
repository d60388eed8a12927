"""Full tagger: embedding table, encoder, CRF, and persistence.

A saved model is the checkpoint file (see autodiff) plus a ``.meta.yaml``
sidecar carrying everything needed to rebuild the graph: encoder config,
ablation level, entity types, vocabulary order, and the lexicon words, so
prediction needs no extra inputs beyond text.
"""

from __future__ import annotations

import numpy as np
import yaml

from . import autodiff as ad
from . import crf as crfmod
from . import encoder as enc
from .corpus import EmbeddingTable, Sentence, TagScheme
from .lexicon import Lexicon, candidate_positions

META_FORMAT = "segner-model-meta"
META_VERSION = 1


class Model:
    def __init__(self, table: EmbeddingTable, scheme: TagScheme,
                 config: enc.EncoderConfig, ablation: str = "+AWC",
                 seed: int = 0, precision: str = "double",
                 lexicon: Lexicon | None = None):
        if precision not in ("single", "double"):
            raise ValueError(f"precision must be single or double, got {precision!r}")
        self.table = table
        self.scheme = scheme
        self.config = config
        self.ablation = ablation
        self.level = enc.ablation_rank(ablation)
        self.seed = seed
        self.precision = precision
        self.dtype = np.float32 if precision == "single" else np.float64
        self.lexicon = lexicon if lexicon is not None else Lexicon()

        rng = np.random.default_rng([seed, 0])
        self.encoder = enc.EncoderParams(
            table.init_matrix(), len(scheme), config, rng, dtype=self.dtype
        )
        self.crf = crfmod.CrfParams(
            len(scheme), rng, dtype=self.dtype,
            constraints=crfmod.bioes_constraints(scheme),
        )

    @property
    def params(self) -> list[ad.Param]:
        return self.encoder.params + self.crf.params

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    # ----- forward paths ---------------------------------------------------

    def loss_on_batch(self, batch, train: bool = False, rng=None) -> ad.Tensor:
        """Mean negative log-likelihood over the batch."""
        packed = enc.pack_batch(batch, dtype=self.dtype)
        em, _ = enc.forward_rows(packed, self.encoder, self.level,
                                 train=train, rng=rng)
        groups = []
        for b in range(len(packed.lengths)):
            gold = batch.tag_ids[b, : batch.lengths[b]]
            groups.append((packed.rows(b), np.asarray(gold, dtype=np.int64)))
        return crfmod.batch_nll(em, groups, self.crf)

    def decode_batch(self, batch) -> list[list[int]]:
        """Viterbi tag ids per sentence (no tape, no dropout)."""
        packed = enc.pack_batch(batch, dtype=self.dtype)
        em, _ = enc.forward_rows(packed, self.encoder, self.level)
        rows = [packed.rows(b) for b in range(len(packed.lengths))]
        return crfmod.viterbi_batch(em.data, rows, self.crf)

    def eval_batch(self, batch):
        """(mean NLL, decoded tag ids) from one shared forward pass."""
        packed = enc.pack_batch(batch, dtype=self.dtype)
        em, _ = enc.forward_rows(packed, self.encoder, self.level)
        rows = [packed.rows(b) for b in range(len(packed.lengths))]
        groups = [
            (rows[b], np.asarray(batch.tag_ids[b, : batch.lengths[b]], dtype=np.int64))
            for b in range(len(rows))
        ]
        nll = crfmod.batch_nll(em, groups, self.crf).item()
        return nll, crfmod.viterbi_batch(em.data, rows, self.crf)

    def decode_sentences(self, sentences: list[Sentence],
                         batch_size: int = 64) -> list[list[str]]:
        """Predicted BIOES tag strings per sentence, in corpus order."""
        from .corpus import make_batches

        batches = make_batches(sentences, self.lexicon, self.scheme, self.table,
                               batch_size, shuffle_seed=None)
        tags = []
        for batch in batches:
            for ids in self.decode_batch(batch):
                tags.append([self.scheme.id_to_tag[i] for i in ids])
        return tags

    def trace(self, text: str) -> enc.EncoderTrace:
        """All intermediate activations for one sentence."""
        char_ids = np.array([self.table.char_id(c) for c in text], dtype=np.int64)
        cand = candidate_positions(text, self.lexicon)
        packed = enc.pack_sentences([(char_ids, cand)], dtype=self.dtype)
        _, parts = enc.forward_rows(packed, self.encoder, self.level, collect=True)
        n = len(text)
        return enc.EncoderTrace(**{k: np.asarray(v.data[:n]) for k, v in parts.items()})

    # ----- persistence -----------------------------------------------------

    def save(self, path: str) -> None:
        ad.save_checkpoint(path, self.params)
        meta = {
            "format": META_FORMAT,
            "version": META_VERSION,
            "precision": self.precision,
            "ablation": self.ablation,
            "seed": self.seed,
            "encoder": self.config.to_dict(),
            "entity_types": list(self.scheme.entity_types),
            "vocab": self.table.tokens,
            "embedding_dim": self.table.dim,
            "lexicon": sorted(self.lexicon.entries),
        }
        with open(meta_path(path), "w", encoding="utf-8") as fh:
            yaml.safe_dump(meta, fh, allow_unicode=True, sort_keys=False)

    @classmethod
    def load(cls, path: str) -> "Model":
        with open(meta_path(path), encoding="utf-8") as fh:
            meta = yaml.safe_load(fh)
        if meta.get("format") != META_FORMAT:
            raise ValueError(f"{meta_path(path)}: not a model meta file")
        table = EmbeddingTable(meta["embedding_dim"])
        zero = np.zeros(meta["embedding_dim"])
        for tok in meta["vocab"]:
            table.add(tok, zero)  # real values come from the checkpoint
        cfg = enc.EncoderConfig(**meta["encoder"])
        model = cls(
            table, TagScheme(meta["entity_types"]), cfg,
            ablation=meta["ablation"], seed=meta["seed"],
            precision=meta["precision"], lexicon=Lexicon(meta["lexicon"]),
        )
        ad.restore_params(model.params, ad.load_checkpoint(path))
        return model

    def state_copy(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        ad.restore_params(self.params, state)


def meta_path(checkpoint_path: str) -> str:
    return str(checkpoint_path) + ".meta.yaml"


def build_table(sentences, embeddings: EmbeddingTable | None,
                dim: int, seed: int) -> EmbeddingTable:
    """Pretrained table if given, else random vectors over the corpus chars."""
    if embeddings is not None:
        if embeddings.dim != dim:
            raise ValueError(f"embedding dim {embeddings.dim} != configured {dim}")
        return embeddings
    chars = sorted({c for s in sentences for c in s.chars})
    return EmbeddingTable.random(chars, dim, seed)
