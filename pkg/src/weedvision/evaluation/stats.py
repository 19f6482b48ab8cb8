"""Tukey HSD multiple comparison with compact letter display."""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, ValidationError

# Upper 5% points of the studentized range distribution, rows keyed by
# within-group degrees of freedom (1..30), columns by group count (2..10).
# Values agree with published tables to the printed precision.
_Q_ALPHA = 0.05
_Q_MIN_GROUPS = 2
_Q_MAX_GROUPS = 10
_Q_MAX_DF = 30
_Q_TABLE = {
    1: (17.9693, 26.9755, 32.8187, 37.0815, 40.4076, 43.1186, 45.3973, 47.3566, 49.0710),
    2: (6.0849, 8.3308, 9.7980, 10.8811, 11.7343, 12.4349, 13.0273, 13.5390, 13.9885),
    3: (4.5007, 5.9096, 6.8245, 7.5017, 8.0371, 8.4783, 8.8525, 9.1766, 9.4620),
    4: (3.9265, 5.0402, 5.7571, 6.2870, 6.7064, 7.0526, 7.3465, 7.6015, 7.8263),
    5: (3.6354, 4.6017, 5.2183, 5.6731, 6.0329, 6.3299, 6.5823, 6.8014, 6.9947),
    6: (3.4605, 4.3392, 4.8956, 5.3049, 5.6284, 5.8953, 6.1222, 6.3192, 6.4931),
    7: (3.3441, 4.1649, 4.6813, 5.0601, 5.3591, 5.6057, 5.8153, 5.9973, 6.1579),
    8: (3.2612, 4.0410, 4.5288, 4.8858, 5.1672, 5.3991, 5.5962, 5.7673, 5.9183),
    9: (3.1992, 3.9485, 4.4149, 4.7554, 5.0235, 5.2444, 5.4319, 5.5947, 5.7384),
    10: (3.1511, 3.8768, 4.3266, 4.6543, 4.9120, 5.1242, 5.3042, 5.4605, 5.5984),
    11: (3.1127, 3.8196, 4.2561, 4.5736, 4.8230, 5.0281, 5.2021, 5.3531, 5.4863),
    12: (3.0813, 3.7729, 4.1987, 4.5077, 4.7502, 4.9496, 5.1187, 5.2653, 5.3946),
    13: (3.0552, 3.7341, 4.1509, 4.4529, 4.6897, 4.8842, 5.0491, 5.1921, 5.3181),
    14: (3.0332, 3.7014, 4.1105, 4.4066, 4.6385, 4.8290, 4.9903, 5.1301, 5.2534),
    15: (3.0143, 3.6734, 4.0760, 4.3670, 4.5947, 4.7816, 4.9399, 5.0770, 5.1979),
    16: (2.9980, 3.6491, 4.0461, 4.3327, 4.5568, 4.7406, 4.8962, 5.0310, 5.1498),
    17: (2.9837, 3.6280, 4.0200, 4.3027, 4.5237, 4.7048, 4.8580, 4.9907, 5.1077),
    18: (2.9712, 3.6093, 3.9970, 4.2763, 4.4944, 4.6731, 4.8243, 4.9552, 5.0705),
    19: (2.9600, 3.5927, 3.9766, 4.2528, 4.4685, 4.6450, 4.7944, 4.9236, 5.0375),
    20: (2.9500, 3.5779, 3.9583, 4.2319, 4.4452, 4.6199, 4.7676, 4.8954, 5.0079),
    21: (2.9410, 3.5646, 3.9419, 4.2130, 4.4244, 4.5973, 4.7435, 4.8699, 4.9813),
    22: (2.9329, 3.5526, 3.9270, 4.1959, 4.4055, 4.5769, 4.7217, 4.8469, 4.9572),
    23: (2.9255, 3.5417, 3.9136, 4.1805, 4.3883, 4.5583, 4.7018, 4.8260, 4.9353),
    24: (2.9188, 3.5317, 3.9013, 4.1663, 4.3727, 4.5413, 4.6838, 4.8069, 4.9152),
    25: (2.9126, 3.5226, 3.8900, 4.1534, 4.3583, 4.5258, 4.6672, 4.7894, 4.8969),
    26: (2.9070, 3.5142, 3.8796, 4.1415, 4.3451, 4.5115, 4.6519, 4.7733, 4.8800),
    27: (2.9017, 3.5064, 3.8701, 4.1305, 4.3329, 4.4983, 4.6378, 4.7584, 4.8644),
    28: (2.8969, 3.4993, 3.8612, 4.1203, 4.3217, 4.4861, 4.6248, 4.7446, 4.8500),
    29: (2.8924, 3.4926, 3.8530, 4.1109, 4.3112, 4.4747, 4.6127, 4.7318, 4.8366),
    30: (2.8882, 3.4864, 3.8454, 4.1021, 4.3015, 4.4642, 4.6014, 4.7199, 4.8241),
}


def studentized_range_critical(n_groups: int, df: int, alpha: float = 0.05) -> float:
    """Critical value of the studentized range from the embedded table.

    Degrees of freedom above 30 fall back to the df=30 row, which is the
    conservative direction.
    """
    if alpha != _Q_ALPHA:
        raise ConfigError(f"only alpha={_Q_ALPHA} is tabulated, got {alpha}")
    if not _Q_MIN_GROUPS <= n_groups <= _Q_MAX_GROUPS:
        raise ConfigError(
            f"group count {n_groups} outside tabulated range "
            f"[{_Q_MIN_GROUPS}, {_Q_MAX_GROUPS}]"
        )
    if df < 1:
        raise ConfigError(f"degrees of freedom {df} must be >= 1")
    return _Q_TABLE[min(df, _Q_MAX_DF)][n_groups - _Q_MIN_GROUPS]


@dataclass(frozen=True)
class ReplicationTable:
    """Replicated metric values for a set of models, one row per model."""

    model_names: Tuple[str, ...]
    metric_name: str
    values: np.ndarray

    def __post_init__(self):
        names = tuple(str(n) for n in self.model_names)
        object.__setattr__(self, "model_names", names)
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValidationError(f"values must be 2-D, got shape {vals.shape}")
        if vals.shape[0] != len(names):
            raise ValidationError(
                f"{len(names)} model names but {vals.shape[0]} value rows"
            )
        if len(set(names)) != len(names):
            raise ValidationError("model names must be unique")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("replication values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def n_groups(self) -> int:
        return self.values.shape[0]

    @property
    def n_replications(self) -> int:
        return self.values.shape[1]


@dataclass
class HsdResult:
    """Pairwise Tukey HSD outcome plus the derived letter display."""

    model_names: Tuple[str, ...]
    means: np.ndarray
    mse: float
    df_within: int
    q_statistics: np.ndarray
    q_critical: float
    significant: np.ndarray
    letters: Dict[str, str]
    exact_fallback: bool = False


def _absorb(columns: List[set]) -> List[set]:
    kept: List[set] = []
    for i, col in enumerate(columns):
        redundant = False
        for j, other in enumerate(columns):
            if i == j:
                continue
            if col < other or (col == other and j < i):
                redundant = True
                break
        if not redundant:
            kept.append(col)
    return kept


def _compact_letter_display(
    n_groups: int, significant: np.ndarray, rank_order: Sequence[int]
) -> List[str]:
    """Insert-and-absorb letter assignment.

    Each letter denotes a maximal set of groups with no significant
    internal difference; groups sharing a letter are not significantly
    different.  Letters are issued in descending-mean order.
    """
    columns: List[set] = [set(range(n_groups))]
    for a_pos in range(n_groups):
        for b_pos in range(a_pos + 1, n_groups):
            i, j = rank_order[a_pos], rank_order[b_pos]
            if not significant[i, j]:
                continue
            split: List[set] = []
            changed = False
            for col in columns:
                if i in col and j in col:
                    changed = True
                    split.append(col - {i})
                    split.append(col - {j})
                else:
                    split.append(col)
            if changed:
                columns = _absorb(split)

    rank = {g: pos for pos, g in enumerate(rank_order)}
    columns.sort(key=lambda col: sorted(rank[g] for g in col))
    if len(columns) > len(string.ascii_lowercase):
        raise ValidationError("more letter groups than available letters")
    letters = ["" for _ in range(n_groups)]
    for ci, col in enumerate(columns):
        for g in col:
            letters[g] += string.ascii_lowercase[ci]
    return ["".join(sorted(s)) for s in letters]


def tukey_hsd(table: ReplicationTable, alpha: float = 0.05) -> HsdResult:
    """One-way ANOVA followed by Tukey's HSD over all group pairs.

    Requires balanced replications.  When every group has zero internal
    variance the q-statistic is undefined and the comparison falls back
    to exact equality of means.
    """
    k = table.n_groups
    n = table.n_replications
    if k < 2:
        raise ValidationError("need at least 2 groups to compare")
    if n < 2:
        raise ValidationError("need at least 2 replications per group")

    values = table.values
    means = values.mean(axis=1)
    df_within = k * (n - 1)
    ssw = float(((values - means[:, None]) ** 2).sum())
    mse = ssw / df_within
    q_critical = studentized_range_critical(k, df_within, alpha)

    q = np.zeros((k, k), dtype=np.float64)
    significant = np.zeros((k, k), dtype=bool)
    exact = mse == 0.0
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            diff = abs(means[i] - means[j])
            if exact:
                q[i, j] = np.inf if diff > 0 else 0.0
                significant[i, j] = diff > 0
            else:
                q[i, j] = diff / np.sqrt(mse / n)
                significant[i, j] = q[i, j] > q_critical

    rank_order = list(np.lexsort((np.arange(k), -means)))
    letter_list = _compact_letter_display(k, significant, rank_order)
    letters = {table.model_names[g]: letter_list[g] for g in range(k)}
    return HsdResult(
        model_names=table.model_names,
        means=means,
        mse=mse,
        df_within=df_within,
        q_statistics=q,
        q_critical=q_critical,
        significant=significant,
        letters=letters,
        exact_fallback=exact,
    )


def tukey_hsd_cld(table: ReplicationTable, alpha: float = 0.05) -> Dict[str, str]:
    """Letter display only: models sharing a letter are not significantly
    different at the given alpha."""
    return tukey_hsd(table, alpha).letters
