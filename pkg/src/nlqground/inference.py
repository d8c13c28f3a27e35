"""Turning head outputs into ranked second-unit proposals.

Offsets are anchor-relative and scaled by the anchor's own window, so the
regression head stays O(1) across scales:

    start = clamp(anchor_start + d_s * w_k, 0, T)
    end   = clamp(anchor_end   + d_e * w_k, 0, T)

Inverted spans are repaired by endpoint swap.  Greedy NMS (not part of the
original selection rule, which just takes top-5) is applied before top-k so
the top-5 are not near-duplicates of the best proposal.  Re-ranking adds
externally computed per-proposal score channels onto the confidence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import AnchorConfig, AnchorSet, build_lattice
from .core import FrameGrid, TimeSpan, Units, index_to_sec, iou
from .nn.model import GroundingModel, ModelOutput


class ChannelAlignmentError(ValueError):
    """A re-rank channel's score list does not align with the proposals."""


@dataclass
class Proposal:
    """A scored candidate span in seconds.

    `source` is "anchor" or "anchor_free"; (t, k) locate the producing cell
    and `source_index` is the position in the raw decode order (the NMS /
    top-k tie-breaker).  `final_score` is populated by re-ranking; until
    then the ranking key is the raw confidence.
    """

    span_sec: TimeSpan
    confidence: float
    source: str
    t: int
    k: int
    source_index: int
    channel_scores: dict[str, float] = field(default_factory=dict)
    final_score: float | None = None

    @property
    def score(self) -> float:
        return self.confidence if self.final_score is None else self.final_score


@dataclass(frozen=True)
class RerankChannel:
    name: str
    scores: list[float]
    weight: float = 1.0


def _sort_key(p: Proposal):
    return (-p.score, p.span_sec.start, p.source_index)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def decode_index_spans(offsets: np.ndarray, anchors: AnchorSet):
    """Shared decode core in index units.

    offsets: (T, 2K) raw head outputs.  Returns (spans (K*T, 2) in t-major /
    k-minor order, backward) where backward maps d(span)/d(offset) back to
    the (T, 2K) layout, honoring clamping (zero gradient) and endpoint swaps
    (permuted gradient).
    """
    cfg = anchors.config
    T, K = cfg.num_frames, cfg.num_scales
    if offsets.shape != (T, 2 * K):
        raise ValueError(f"offsets shape {offsets.shape} != expected ({T}, {2 * K})")
    widths = np.tile(np.asarray(anchors.window_sizes, dtype=np.float64), T)[:, None]
    d = np.asarray(offsets, dtype=np.float64).reshape(T * K, 2)
    raw = anchors.spans + d * widths
    clamped = np.clip(raw, 0.0, float(T))
    swap = clamped[:, 0] > clamped[:, 1]
    spans = clamped.copy()
    spans[swap] = spans[swap][:, ::-1]
    low_clip = raw <= 0.0
    high_clip = raw >= float(T)
    active = ~(low_clip | high_clip)

    def backward(d_spans: np.ndarray) -> np.ndarray:
        g = np.asarray(d_spans, dtype=np.float64).copy()
        g[swap] = g[swap][:, ::-1]  # route gradients back through the swap
        g *= active
        g *= widths
        return g.reshape(T, 2 * K)

    return spans, backward


def decode_proposals(output: ModelOutput, anchors: AnchorSet, grid: FrameGrid) -> list[Proposal]:
    """All K*T anchors decoded to scored seconds-unit proposals."""
    cfg = anchors.config
    T, K = cfg.num_frames, cfg.num_scales
    if output.confidence.shape != (T, K):
        raise ValueError(f"confidence shape {output.confidence.shape} != expected ({T}, {K})")
    if grid.num_frames != T:
        raise ValueError(f"grid has {grid.num_frames} frames but anchors expect {T}")
    spans, _ = decode_index_spans(output.offsets, anchors)
    conf = np.asarray(output.confidence, dtype=np.float64).reshape(T * K)
    proposals = []
    for i in range(T * K):
        sec = index_to_sec(TimeSpan(spans[i, 0], spans[i, 1], Units.INDEX), grid)
        proposals.append(Proposal(
            span_sec=sec, confidence=float(conf[i]),
            source="anchor", t=i // K, k=i % K, source_index=i,
        ))
    return proposals


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def decode_anchor_free(output: ModelOutput, grid: FrameGrid) -> list[Proposal]:
    """No-manual-anchor variant: one proposal per frame.

    The two raw regression values per frame become nonnegative left/right
    extents via softplus (as fractions of T); the span grows from the frame
    center t + 0.5.
    """
    T = grid.num_frames
    if output.offsets.shape != (T, 2):
        raise ValueError(
            f"anchor-free decode expects (T, 2) offsets, got {output.offsets.shape}")
    if output.confidence.shape[1] != 1:
        raise ValueError(
            f"anchor-free decode expects a single confidence per frame, got {output.confidence.shape}")
    extents = softplus(np.asarray(output.offsets, dtype=np.float64)) * T
    centers = np.arange(T, dtype=np.float64) + 0.5
    starts = np.clip(centers - extents[:, 0], 0.0, float(T))
    ends = np.clip(centers + extents[:, 1], 0.0, float(T))
    conf = np.asarray(output.confidence, dtype=np.float64).reshape(T)
    proposals = []
    for t in range(T):
        sec = index_to_sec(TimeSpan(starts[t], ends[t], Units.INDEX), grid)
        proposals.append(Proposal(
            span_sec=sec, confidence=float(conf[t]),
            source="anchor_free", t=t, k=0, source_index=t,
        ))
    return proposals


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------


def nms(proposals: list[Proposal], iou_threshold: float) -> list[Proposal]:
    """Greedy suppression: walk proposals by descending score and keep one
    iff its IoU with every kept proposal is <= threshold."""
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"NMS threshold must lie in (0, 1], got {iou_threshold}")
    kept: list[Proposal] = []
    for p in sorted(proposals, key=_sort_key):
        if all(iou(p.span_sec, q.span_sec) <= iou_threshold for q in kept):
            kept.append(p)
    return kept


def top_k(proposals: list[Proposal], k: int) -> list[Proposal]:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return sorted(proposals, key=_sort_key)[:k]


def rerank(proposals: list[Proposal], channels: list[RerankChannel]) -> list[Proposal]:
    """Additive score fusion: final = confidence + sum_c weight_c * score_c.

    Proposals are re-sorted by the fused score, stably, so all-tie channels
    leave the order unchanged.  Channel scores are recorded on each proposal.
    """
    for ch in channels:
        if len(ch.scores) != len(proposals):
            raise ChannelAlignmentError(
                f"channel {ch.name!r} has {len(ch.scores)} scores for {len(proposals)} proposals")
    for i, p in enumerate(proposals):
        final = p.confidence
        for ch in channels:
            p.channel_scores[ch.name] = float(ch.scores[i])
            final += ch.weight * float(ch.scores[i])
        p.final_score = final
    return sorted(proposals, key=lambda p: -p.score)  # sorted() is stable


# ---------------------------------------------------------------------------
# dataset-level prediction
# ---------------------------------------------------------------------------


def predict_dataset(
    model: GroundingModel,
    dataset,
    anchor_config: AnchorConfig,
    topk: int = 5,
    nms_iou: float = 0.5,
    mode: str = "anchor",
    batch_size: int = 32,
) -> list[tuple[str, str, list[Proposal]]]:
    """Ranked top-k proposals for every query in a dataset (eval mode).

    nms_iou = 0 is the sentinel for "no suppression".  Returns
    (query_id, video_id, proposals) in annotation order.
    """
    from .data import make_batches  # local import; data is I/O-layer, no cycle

    if mode not in ("anchor", "anchor_free"):
        raise ValueError(f"unknown prediction mode {mode!r}")
    if mode == "anchor_free" and model.config.num_scales != 1:
        raise ValueError(
            "anchor-free decoding needs a single-scale head "
            f"(num_scales=1), got {model.config.num_scales}")
    anchor_set = build_lattice(anchor_config)
    results = {}
    for batch in make_batches(dataset, batch_size, anchor_config.num_frames,
                              shuffle_seed=0, shuffle=False):
        conf, offs, fused, _ = model.forward_batch(
            batch.video, batch.video_mask, batch.text, batch.text_mask, train=False)
        for j, qid in enumerate(batch.query_ids):
            out = ModelOutput(confidence=conf[j], offsets=offs[j], fused=fused[j])
            if mode == "anchor":
                proposals = decode_proposals(out, anchor_set, batch.grids[j])
            else:
                proposals = decode_anchor_free(out, batch.grids[j])
            if nms_iou > 0:
                proposals = nms(proposals, nms_iou)
            results[qid] = (batch.video_ids[j], top_k(proposals, topk))
    return [(qid, results[qid][0], results[qid][1])
            for qid in (a.query_id for a in dataset.annotations)]


# ---------------------------------------------------------------------------
# wire formats
# ---------------------------------------------------------------------------


def write_predictions(path, records: list[tuple[str, str, list[Proposal]]]) -> None:
    """JSON-lines, one object per query, proposals in rank order."""
    with open(path, "w", encoding="utf-8") as f:
        for query_id, video_id, proposals in records:
            f.write(json.dumps({
                "query_id": query_id,
                "video_id": video_id,
                "proposals": [
                    {"start_sec": p.span_sec.start, "end_sec": p.span_sec.end, "score": p.score}
                    for p in proposals
                ],
            }) + "\n")


def read_predictions(path) -> list[dict]:
    records = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}:{ln}: invalid JSON: {e}") from e
        for key in ("query_id", "proposals"):
            if key not in rec:
                raise ValueError(f"{path}:{ln}: missing key {key!r}")
        records.append(rec)
    return records


def read_channel_file(path) -> dict[str, list[float]]:
    """JSON-lines {"query_id", "channel", "scores"}; returns query -> scores."""
    out: dict[str, list[float]] = {}
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("query_id", "channel", "scores"):
            if key not in rec:
                raise ValueError(f"{path}:{ln}: missing key {key!r}")
        out[rec["query_id"]] = [float(s) for s in rec["scores"]]
    return out


def write_channel_file(path, channel: str, scores_by_query: dict[str, list[float]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for query_id in scores_by_query:
            f.write(json.dumps({
                "query_id": query_id, "channel": channel,
                "scores": scores_by_query[query_id],
            }) + "\n")
