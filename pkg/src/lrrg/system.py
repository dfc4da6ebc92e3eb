"""Full report-generation model: encoder + frozen text encoder + decoder, batch
collation, the combined training loss and report generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .decoder import ReportDecoder, decode_generate, decode_train
from .model import ATTRIBUTE_INDEX, EncoderOutput, LongitudinalEncoder, PriorInputError, \
    classification_loss, labels_from_logits, labels_to_prompt
from .params import ParameterStore
from .synth import FINDINGS, StudyRecord, template_tokens
from .tensor import Tensor
from .text import FrozenTextEncoder, Vocabulary, tokenize, words


def default_vocabulary() -> Vocabulary:
    return Vocabulary(template_tokens())


@dataclass
class Batch:
    """Records reordered so those with a prior come first."""

    records: list[StudyRecord]
    current: np.ndarray               # (N, C, H, W)
    labels: np.ndarray                # (N, 14) attribute indices
    gold: list[list[int]]             # report ids ending with EOS
    prior: np.ndarray | None = None   # (P, C, H, W)
    prior_labels: np.ndarray | None = None
    text: np.ndarray | None = None    # (P, L, C_txt), zero padded
    text_mask: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def n_prior(self) -> int:
        return 0 if self.prior is None else len(self.prior)


@dataclass
class StepLosses:
    total: Tensor
    lm: float
    ce_cur: float
    ce_prior: float
    n: int
    n_prior: int


class ReportModel:
    def __init__(self, cfg: RunConfig, vocab: Vocabulary | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.vocab = vocab or default_vocabulary()
        self.store = ParameterStore(cfg.seed, dtype=self.dtype, mirror_branches=cfg.mirror_init)
        self.text_encoder = FrozenTextEncoder(len(self.vocab), cfg.text_dim, seed=cfg.seed,
                                              use_positions=cfg.text_positions, dtype=self.dtype)
        self.encoder = LongitudinalEncoder(self.store, cfg)
        self.decoder = ReportDecoder(self.store, len(self.vocab), cfg.stage_channels[-1], cfg.d_model,
                                     cfg.n_layers, cfg.n_heads, cfg.d_ff)
        self.prompt_ids = {tok: self.vocab.id(tok) for tok in ("[BLA]", "[POS]", "[NEG]", "[UNC]")}

    # -- inputs ------------------------------------------------------------

    def text_feature(self, report: str) -> np.ndarray:
        """``(L, C_txt)`` frozen features of a prior report."""
        ids = tokenize(report, self.vocab, self.cfg.max_text_len)
        return self.text_encoder.encode(ids).data.T

    def report_ids(self, report: str) -> list[int]:
        return [self.vocab.id(w) for w in words(report)] + [self.vocab.eos_id]

    def collate(self, records: Sequence[StudyRecord]) -> Batch:
        use_prior = self.cfg.use_prior
        for r in records:
            if (r.prior_image is None) != (r.prior_report is None):
                raise PriorInputError(f"{r.study_id}: prior image and prior report must be given together")
        ordered = sorted(records, key=lambda r: not (use_prior and r.has_prior))
        with_prior = [r for r in ordered if use_prior and r.has_prior]
        batch = Batch(
            records=list(ordered),
            current=np.stack([r.image for r in ordered]).astype(self.dtype),
            labels=np.array([[ATTRIBUTE_INDEX[a] for a in r.labels] for r in ordered]),
            gold=[self.report_ids(r.report) for r in ordered],
        )
        if with_prior:
            batch.prior = np.stack([r.prior_image for r in with_prior]).astype(self.dtype)
            batch.prior_labels = np.array([[ATTRIBUTE_INDEX[a] for a in r.prior_labels] for r in with_prior])
            feats = [self.text_feature(r.prior_report) for r in with_prior]
            longest = max(len(f) for f in feats)
            batch.text = np.zeros((len(feats), longest, self.cfg.text_dim), dtype=self.dtype)
            batch.text_mask = np.zeros((len(feats), longest), dtype=bool)
            for i, f in enumerate(feats):
                batch.text[i, : len(f)] = f
                batch.text_mask[i, : len(f)] = True
        return batch

    # -- forward -----------------------------------------------------------

    def encode(self, batch: Batch, trace: bool = False) -> EncoderOutput:
        prior = None if batch.prior is None else Tensor(batch.prior)
        text = None if batch.text is None else Tensor(batch.text)
        return self.encoder.forward(Tensor(batch.current), prior, text, batch.text_mask, trace=trace)

    def prompts(self, batch: Batch, out: EncoderOutput, teacher: bool | None = None) -> np.ndarray:
        teacher = self.cfg.teacher_forcing if teacher is None else teacher
        if teacher:
            labels = [r.labels for r in batch.records]
        else:
            labels = labels_from_logits(out.current_logits.data)
        return np.array([[self.prompt_ids[t] for t in labels_to_prompt(lab)] for lab in labels])

    def losses(self, batch: Batch) -> StepLosses:
        """Batch-mean loss; absent prior terms count as zero in the mean.

        The components are combined in 64-bit so that the logged scalars
        recompose the logged total exactly.
        """
        out = self.encode(batch)
        n = batch.n
        lm = decode_train(self.decoder, out.current, self.prompts(batch, out), batch.gold,
                          self.vocab.bos_id, self.vocab.pad_id)
        ce_cur = classification_loss(out.current_logits, batch.labels)
        lm_s = T.cast(T.mean(lm), np.float64)
        ce_cur_s = T.cast(T.mean(ce_cur), np.float64)
        if out.prior_logits is not None:
            ce_prior = classification_loss(out.prior_logits, batch.prior_labels)
            ce_prior_s = T.scale(T.cast(T.sum(ce_prior), np.float64), 1.0 / n)
        else:
            ce_prior_s = Tensor(np.zeros((), dtype=np.float64))
        w = self.cfg.loss_weight
        total = T.add(lm_s, T.scale(T.add(ce_cur_s, ce_prior_s), w))
        return StepLosses(total, float(lm_s.data), float(ce_cur_s.data), float(ce_prior_s.data),
                          n, batch.n_prior)

    def generate(self, records: Sequence[StudyRecord], beam_width: int | None = None
                 ) -> list[tuple[StudyRecord, str, object, tuple[str, ...]]]:
        """Generated report per record, in the input order.

        Returns ``(record, text, GenerationResult, predicted_labels)`` tuples.
        """
        beam = self.cfg.beam_width if beam_width is None else beam_width
        with T.no_grad():
            batch = self.collate(records)
            out = self.encode(batch)
            results = decode_generate(self.decoder, out.current, self.prompts(batch, out, teacher=False),
                                      self.vocab.bos_id, self.vocab.eos_id, self.cfg.max_gen_len, beam)
        predicted = labels_from_logits(out.current_logits.data)
        by_id = {r.study_id: (r, self.vocab.decode(res.tokens), res, lab)
                 for r, res, lab in zip(batch.records, results, predicted)}
        return [by_id[r.study_id] for r in records]

    @property
    def disease_names(self) -> tuple[str, ...]:
        return FINDINGS
