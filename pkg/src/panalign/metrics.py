"""CMC rank-i accuracy and mean average precision.

AP uses the discrete estimator: mean over relevant positions r of
(relevant in top-r) / r. Queries with no cross-camera relevant gallery
item are dropped from both the CMC and mAP denominators.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .retrieval import rank

RANKS = (1, 5, 10, 20)


class QueryHasNoRelevant(Exception):
    """Signals a query excluded from evaluation, not a crash."""


def average_precision(ranklist):
    rel = np.asarray(ranklist.relevant, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        raise QueryHasNoRelevant(f"query {ranklist.query_id} has no relevant item")
    positions = np.nonzero(rel)[0] + 1  # 1-based
    hits = np.arange(1, total + 1)
    return float((hits / positions).mean())


def cmc(ranklists, ranks=RANKS):
    """Fraction of queries whose first relevant item lands in the top i."""
    firsts = []
    for rl in ranklists:
        rel = np.asarray(rl.relevant, dtype=bool)
        if not rel.any():
            raise QueryHasNoRelevant(f"query {rl.query_id} has no relevant item")
        firsts.append(int(np.nonzero(rel)[0][0]) + 1)
    firsts = np.asarray(firsts)
    return {i: float((firsts <= i).mean()) for i in ranks}


@dataclass
class EvalReport:
    rank_accuracy: dict
    mean_ap: float
    per_query_ap: list
    num_valid_queries: int
    num_dropped_queries: int = 0

    def to_dict(self):
        return {
            "rank_accuracy": {str(k): v for k, v in self.rank_accuracy.items()},
            "mAP": self.mean_ap,
            "per_query_ap": self.per_query_ap,
            "num_valid_queries": self.num_valid_queries,
            "num_dropped_queries": self.num_dropped_queries,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)

    def write_cmc_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["rank", "accuracy"])
            for i in sorted(self.rank_accuracy):
                writer.writerow([i, self.rank_accuracy[i]])


def evaluate(dist, query_meta, gallery_meta, cross_camera_only=None, ranks=RANKS):
    """Build rank lists and compute CMC + mAP.

    ``cross_camera_only`` defaults to on when the metadata spans >= 2
    cameras, matching the usual protocol.
    """
    if cross_camera_only is None:
        cams = {m[1] for m in query_meta} | {m[1] for m in gallery_meta}
        cross_camera_only = len(cams) >= 2
    lists = rank(dist, query_meta, gallery_meta, cross_camera_only=cross_camera_only)
    valid = [rl for rl in lists if np.asarray(rl.relevant).any()]
    if not valid:
        raise InvalidArgumentError("no query has any relevant gallery item")
    aps = [average_precision(rl) for rl in valid]
    return EvalReport(
        rank_accuracy=cmc(valid, ranks=ranks),
        mean_ap=float(np.mean(aps)),
        per_query_ap=aps,
        num_valid_queries=len(valid),
        num_dropped_queries=len(lists) - len(valid),
    )
