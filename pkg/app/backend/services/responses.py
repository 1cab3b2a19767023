"""Average fused responses of a trained two-branch DCL block.

For each requested fused filter k the table holds the mean of z_k grouped by
number label, the mean of v(1)_k grouped by the first digit and the mean of
v(2)_k grouped by the last digit. Spatial positions are averaged per sample.
"""

import csv
import io
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from app.backend.core.errors import NoDclBlock, PreconditionViolated
from app.backend.core.network import Network
from app.data_processing.synthesis.composer import Dataset

logger = logging.getLogger(__name__)

CSV_HEADER = ["filter", "response", "group_by", "label", "mean", "count"]


@dataclass(frozen=True)
class ResponseRow:
    filter: int
    response: str      # z, v1 or v2
    group_by: str      # number, digit0 or digit<D-1>
    label: int
    mean: float        # NaN for empty groups
    count: int


class _GroupMeans:
    """Running per-group sums and counts; one pass over the data."""

    def __init__(self, groups: int, filters: int):
        self.sums = np.zeros((groups, filters), dtype=np.float64)
        self.counts = np.zeros(groups, dtype=np.int64)

    def add(self, keys: np.ndarray, values: np.ndarray) -> None:
        np.add.at(self.sums, keys, values.astype(np.float64))
        self.counts += np.bincount(keys, minlength=len(self.counts))

    def means(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts[:, None] > 0, self.sums / np.maximum(self.counts, 1)[:, None], np.nan)


def _dcl_layer(net: Network, layer: Optional[int]):
    blocks = net.dcl_layers()
    if not blocks:
        raise NoDclBlock("network has no DCL block")
    if layer is None:
        return blocks[0]
    for index, block in blocks:
        if index == layer:
            return index, block
    raise NoDclBlock(f"layer {layer} is not a DCL block; DCL layers: {[i for i, _ in blocks]}")


def response_stats(
    net: Network,
    data: Dataset,
    filters: Sequence[int],
    layer: Optional[int] = None,
    batch_size: int = 256,
) -> list[ResponseRow]:
    index, block = _dcl_layer(net, layer)
    if block.T != 2:
        raise PreconditionViolated(f"response statistics need a two-branch block, got T = {block.T}")
    digits = data.require_digit_labels()
    filters = list(filters)
    if not filters:
        raise ValueError("no filters requested")
    for k in filters:
        if not 0 <= k < block.cfg.K2:
            raise ValueError(f"filter {k} outside [0, {block.cfg.K2})")

    last = digits.shape[1] - 1
    z_acc = _GroupMeans(data.num_classes, len(filters))
    v1_acc = _GroupMeans(10, len(filters))
    v2_acc = _GroupMeans(10, len(filters))
    for start in range(0, len(data), batch_size):
        x = data.images[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        d = digits[start:start + batch_size]
        cache = net.forward(x, y, mode="eval", capture=True).activations[index]
        z_acc.add(y, cache.z[:, filters].mean(axis=(2, 3)))
        v1_acc.add(d[:, 0], cache.v[0][:, filters].mean(axis=(2, 3)))
        v2_acc.add(d[:, last], cache.v[1][:, filters].mean(axis=(2, 3)))

    rows: list[ResponseRow] = []
    groups = [("z", "number", z_acc), ("v1", "digit0", v1_acc), ("v2", f"digit{last}", v2_acc)]
    for j, k in enumerate(filters):
        for response, group_by, acc in groups:
            means = acc.means()
            rows.extend(
                ResponseRow(k, response, group_by, label, float(means[label, j]), int(acc.counts[label]))
                for label in range(len(acc.counts))
            )
    logger.info("response statistics for filters %s over %d samples", filters, len(data))
    return rows


def responses_csv(rows: list[ResponseRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r.filter, r.response, r.group_by, r.label, repr(r.mean), r.count])
    return buf.getvalue()
