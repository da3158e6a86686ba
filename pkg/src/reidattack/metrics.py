"""Retrieval evaluation: Euclidean distance matrices, CMC Rank-k and mAP.

Gallery entries sharing the query's identity *and* camera are removed before
ranking, as are junk identities. Ties in distance are broken by gallery
index, so every report is deterministic.
"""
from dataclasses import dataclass, field

import numpy as np

from .data import DEFAULT_JUNK_IDS
from .exceptions import ConfigError, ProtocolError

DEFAULT_RANKS = (1, 5, 10)


@dataclass(frozen=True)
class EvalProtocol:
    exclude_same_camera_same_id: bool = True
    junk_ids: frozenset = DEFAULT_JUNK_IDS

    def __post_init__(self):
        object.__setattr__(self, "junk_ids", frozenset(int(j) for j in self.junk_ids))


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    values: np.ndarray
    query_ids: np.ndarray = None
    query_cams: np.ndarray = None
    gallery_ids: np.ndarray = None
    gallery_cams: np.ndarray = None

    def with_labels(self, query_ids, query_cams, gallery_ids, gallery_cams):
        return DistanceMatrix(self.values, np.asarray(query_ids), np.asarray(query_cams),
                              np.asarray(gallery_ids), np.asarray(gallery_cams))


@dataclass
class EvalReport:
    mAP: float
    cmc: dict
    per_query_ap: list = field(default_factory=list)

    def row(self, dataset, method):
        """One results-table row: dataset, method, mAP, R-1, R-5, R-10 (2 decimals)."""
        return [dataset, method] + [f"{v:.2f}" for v in
                                    (self.mAP, self.cmc[1], self.cmc[5], self.cmc[10])]

    def metrics(self):
        return {"mAP": self.mAP, "R-1": self.cmc[1], "R-5": self.cmc[5], "R-10": self.cmc[10]}


def compute_distance_matrix(query_embs, gallery_embs):
    """Pairwise Euclidean distances, shape ``(len(query_embs), len(gallery_embs))``."""
    q = np.asarray(query_embs, dtype=np.float64)
    g = np.asarray(gallery_embs, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2:
        raise ConfigError(f"embeddings must be 2-D, got shapes {q.shape} and {g.shape}")
    if q.shape[1] != g.shape[1]:
        raise ConfigError(f"embedding length mismatch: query {q.shape[1]} vs gallery {g.shape[1]}")
    diff = q[:, None, :] - g[None, :, :]
    return DistanceMatrix(np.sqrt(np.einsum("qgd,qgd->qg", diff, diff)))


def _match_lists(dm, protocol):
    """Per query, the correct-match indicator over the valid gallery in rank order."""
    if dm.query_ids is None or dm.gallery_ids is None:
        raise ProtocolError("distance matrix carries no identity/camera labels")
    values = np.asarray(dm.values)
    qids, qcams = np.asarray(dm.query_ids), np.asarray(dm.query_cams)
    gids, gcams = np.asarray(dm.gallery_ids), np.asarray(dm.gallery_cams)
    junk = np.isin(gids, list(protocol.junk_ids)) if protocol.junk_ids else np.zeros(len(gids), bool)
    out = []
    for i in range(values.shape[0]):
        keep = ~junk
        if protocol.exclude_same_camera_same_id:
            keep = keep & ~((gids == qids[i]) & (gcams == qcams[i]))
        cols = np.flatnonzero(keep)
        order = cols[np.argsort(values[i, cols], kind="stable")]
        matches = gids[order] == qids[i]
        if not matches.any():
            raise ProtocolError(f"query {i} (person_id {qids[i]}, camera {qcams[i]}) has no "
                                f"valid correct gallery match")
        out.append(matches)
    return out


def _first_hit_ranks(match_lists):
    return np.array([int(np.argmax(m)) + 1 for m in match_lists])


def _average_precision(matches):
    hits = np.flatnonzero(matches)
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def cmc_at_k(dm, protocol, k):
    """Percentage of queries whose first valid correct match is within the top ``k``."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    ranks = _first_hit_ranks(_match_lists(dm, protocol))
    return 100.0 * np.count_nonzero(ranks <= k) / len(ranks)


def mean_average_precision(dm, protocol):
    aps = [_average_precision(m) for m in _match_lists(dm, protocol)]
    return 100.0 * float(np.mean(aps))


def evaluate_distances(dm, protocol, ranks=DEFAULT_RANKS):
    """mAP, CMC and per-query AP from one pass over the ranking."""
    lists = _match_lists(dm, protocol)
    first = _first_hit_ranks(lists)
    aps = [_average_precision(m) for m in lists]
    cmc = {k: 100.0 * np.count_nonzero(first <= k) / len(first) for k in ranks}
    return EvalReport(mAP=100.0 * float(np.mean(aps)), cmc=cmc, per_query_ap=aps)


def evaluate_reid(model, bundle, protocol=EvalProtocol(), query_override=None):
    """Embed (optionally replaced) query images and the clean gallery, then score.

    ``model`` is anything with a ``transform(images) -> embeddings`` method,
    e.g. a fitted :class:`~reidattack.model.ReIDVictim` or a dropout-defended view.
    """
    if query_override is None:
        queries = bundle.images("query")
    else:
        queries = np.asarray(query_override, dtype=np.float64)
        if queries.shape != (len(bundle.query), 3) + bundle.image_shape:
            raise ConfigError(f"query override of shape {queries.shape} does not align with "
                              f"{len(bundle.query)} query images of shape (3, {bundle.image_shape})")
    dm = compute_distance_matrix(model.transform(queries), model.transform(bundle.images("gallery")))
    dm = dm.with_labels(bundle.person_ids("query"), bundle.camera_ids("query"),
                        bundle.person_ids("gallery"), bundle.camera_ids("gallery"))
    return evaluate_distances(dm, protocol)
