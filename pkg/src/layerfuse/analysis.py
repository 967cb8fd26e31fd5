"""Cross-language similarity probe and report serialization."""

import json
from dataclasses import dataclass

import numpy as np

from .bank import DataError
from .tensor import mean_pool_tokens
from .training import SweepReport


class SimilarityError(ValueError):
    """Undefined similarity (zero-norm vector) or an empty report."""


@dataclass
class SimilarityReport:
    """Average cosine similarity between parallel sentence embeddings."""

    model: str
    average: float
    per_language: dict
    pairs: int


def cosine_similarity(u, v):
    """u.v / (|u||v|), clipped into [-1, 1].

    Bit-identical vectors short-circuit to exactly 1.0, so comparing an
    embedding against itself never picks up rounding noise.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise DataError(f"cosine_similarity: lengths differ, {u.size} vs {v.size}")
    norm_u = np.linalg.norm(u)
    norm_v = np.linalg.norm(v)
    if norm_u == 0.0 or norm_v == 0.0:
        raise SimilarityError("cosine similarity is undefined for zero-norm vectors")
    if np.array_equal(u, v):
        return 1.0
    return float(np.clip(np.dot(u, v) / (norm_u * norm_v), -1.0, 1.0))


def sentence_embeddings(system, bank, rows):
    """Mean-pooled system output per sentence, in eval mode."""
    fused = system.fused_batch(bank, np.asarray(rows), training=False)
    return mean_pool_tokens(fused).data[:, 0, :]


def avg_cross_lingual_similarity(system, source, targets, pairs=20, split="test"):
    """Average cosine similarity of parallel sentences against each target bank.

    Uses the first ``pairs`` sentences of the split (all of them when
    ``pairs`` is None); the overall average is the arithmetic mean over every
    (sentence, target-language) pair.
    """
    rows = source.split_indices(split)
    if rows.size == 0:
        raise DataError(f"source bank has no sentences in the {split!r} split")
    if pairs is not None:
        if pairs < 1:
            raise DataError("pairs must be at least 1")
        rows = rows[:pairs]
    targets = list(targets)
    if not targets:
        raise DataError("at least one target bank is required")
    source_vectors = sentence_embeddings(system, source, rows)
    per_language = {}
    combined = []
    for index, target in enumerate(targets):
        if target.shape[0] != source.shape[0] or list(target.splits) != list(source.splits):
            raise DataError(
                f"target bank {index} is not sentence-aligned with the source bank"
            )
        target_vectors = sentence_embeddings(system, target, rows)
        sims = [
            cosine_similarity(source_vectors[i], target_vectors[i])
            for i in range(rows.size)
        ]
        tag = target.language_tag()
        if tag in per_language:
            tag = f"{tag}.{index}"
        per_language[tag] = float(np.mean(sims))
        combined.extend(sims)
    return SimilarityReport(
        model=system.config_id(),
        average=float(np.mean(combined)),
        per_language=per_language,
        pairs=len(combined),
    )


def _sorted_rows(report):
    if not report.rows:
        raise SimilarityError("sweep report must be non-empty")
    return sorted(report.rows, key=lambda row: (row.lower is not None, row.lower or 0))


_SWEEP_COLUMNS = (
    "config",
    "lower",
    "source_accuracy",
    "source_f1",
    "target_accuracy",
    "target_f1",
)


def _sweep_csv(report):
    lines = [",".join(_SWEEP_COLUMNS)]
    for row in _sorted_rows(report):
        lower = "" if row.lower is None else str(row.lower)
        lines.append(
            f"{row.config},{lower},{row.source_accuracy!r},{row.source_f1!r},"
            f"{row.target_accuracy!r},{row.target_f1!r}"
        )
    return "\n".join(lines) + "\n"


def _sweep_json(report):
    doc = {
        "upper": report.upper,
        "variant": report.variant,
        "gate_mode": report.mode,
        "seed": report.seed,
        "rows": [
            {
                "config": row.config,
                "lower": row.lower,
                "source_accuracy": row.source_accuracy,
                "source_f1": row.source_f1,
                "target_accuracy": row.target_accuracy,
                "target_f1": row.target_f1,
            }
            for row in _sorted_rows(report)
        ],
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _sweep_table(report):
    header = f"{'config':<10} {'src acc':>8} {'src F1':>8} {'tgt acc':>8} {'tgt F1':>8}"
    lines = [header, "-" * len(header)]
    for row in _sorted_rows(report):
        lines.append(
            f"{row.config:<10} {row.source_accuracy:>8.4f} {row.source_f1:>8.4f} "
            f"{row.target_accuracy:>8.4f} {row.target_f1:>8.4f}"
        )
    return "\n".join(lines) + "\n"


def _similarity_entries(report):
    if not report.per_language:
        raise SimilarityError("similarity report must be non-empty")
    return sorted(report.per_language.items())


def _similarity_csv(report):
    lines = ["model,language,pairs,avg_cosine_similarity"]
    for language, value in _similarity_entries(report):
        lines.append(f"{report.model},{language},{report.pairs},{value!r}")
    lines.append(f"{report.model},all,{report.pairs},{report.average!r}")
    return "\n".join(lines) + "\n"


def _similarity_json(report):
    _similarity_entries(report)
    doc = {
        "model": report.model,
        "avg_cosine_similarity": report.average,
        "per_language": dict(sorted(report.per_language.items())),
        "pairs": report.pairs,
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _similarity_table(report):
    header = f"{'model':<10} {'language':<10} {'Avg C.S.':>10}"
    lines = [header, "-" * len(header)]
    for language, value in _similarity_entries(report):
        lines.append(f"{report.model:<10} {language:<10} {value:>10.4f}")
    lines.append(f"{report.model:<10} {'all':<10} {report.average:>10.4f}")
    return "\n".join(lines) + "\n"


_EMITTERS = {
    SweepReport: {"csv": _sweep_csv, "json": _sweep_json, "table": _sweep_table},
    SimilarityReport: {
        "csv": _similarity_csv,
        "json": _similarity_json,
        "table": _similarity_table,
    },
}

REPORT_FORMATS = ("csv", "json", "table")


def emit_report(report, fmt="csv"):
    """Serialize a sweep or similarity report; deterministic per report.

    Rows are emitted baseline-first then by ascending layer index; languages
    alphabetically.  Two emissions of the same report are byte-identical.
    """
    for kind, emitters in _EMITTERS.items():
        if isinstance(report, kind):
            if fmt not in emitters:
                raise ValueError(f"unknown report format {fmt!r}, expected one of {REPORT_FORMATS}")
            return emitters[fmt](report)
    raise TypeError(f"cannot emit report of type {type(report).__name__}")
