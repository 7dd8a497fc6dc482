"""Ground-truth preparation: table ingestion, PCA, softmax training, environment build.

Tables on disk are comma-separated with header ``option,feat_1,...,feat_C,label``
and 1-based labels.  In memory labels are 0-based like everywhere else in the
package.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from aifbandit.environment import Environment
from aifbandit.model import ContractError, SoftmaxParams, logsumexp

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Unreadable or malformed input data."""


@dataclass(frozen=True)
class TableSchema:
    """Expected shape of an input table; ``None`` means infer from the file."""

    n_features: int | None = None
    n_labels: int | None = None
    delimiter: str = ","


@dataclass(frozen=True)
class MaskedRow:
    line: int
    option: str
    reason: str


@dataclass(frozen=True, eq=False)
class LabeledContextTable:
    """Valid rows grouped by option plus the rows that were masked out."""

    option_ids: tuple
    features: tuple
    labels: tuple
    n_labels: int
    masked: tuple = ()

    @property
    def n_options(self) -> int:
        return len(self.option_ids)

    @property
    def n_raw(self) -> int:
        return self.features[0].shape[1]

    def pooled(self) -> np.ndarray:
        return np.vstack(self.features)

    def __eq__(self, other):
        if not isinstance(other, LabeledContextTable):
            return NotImplemented
        return (
            self.option_ids == other.option_ids
            and self.n_labels == other.n_labels
            and all(np.array_equal(a, b) for a, b in zip(self.features, other.features))
            and all(np.array_equal(a, b) for a, b in zip(self.labels, other.labels))
        )


def _header(n_features: int) -> list:
    return ["option", *(f"feat_{i}" for i in range(1, n_features + 1)), "label"]


def ingest_table(path, schema: TableSchema = TableSchema(), report: bool = True) -> LabeledContextTable:
    """Parse a labelled context table.

    Rows with non-numeric or non-finite features, or labels outside
    ``1..F``, are masked with a reason instead of aborting.  A row with the
    wrong number of fields is a hard error.  With ``report=True`` the masked
    rows are written to ``<path>.masked.txt``.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"no such table: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=schema.delimiter))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DatasetError(f"{path}: empty table")
    head = [h.strip() for h in rows[0]]
    n_feat = len(head) - 2
    if n_feat < 1 or head != _header(n_feat):
        raise DatasetError(f"{path}: header must be option,feat_1..feat_C,label; got {','.join(head)}")
    if schema.n_features is not None and schema.n_features != n_feat:
        raise DatasetError(f"{path}: expected {schema.n_features} features, header has {n_feat}")
    if len(rows) < 2:
        raise DatasetError(f"{path}: table has a header but no rows")

    groups: dict = {}
    masked = []
    parsed_labels = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != n_feat + 2:
            raise DatasetError(f"{path}, line {line}: expected {n_feat + 2} fields, got {len(row)}")
        opt = row[0].strip()
        try:
            x = np.array([float(v) for v in row[1:-1]])
        except ValueError:
            masked.append(MaskedRow(line, opt, "non-numeric feature"))
            continue
        if not np.all(np.isfinite(x)):
            masked.append(MaskedRow(line, opt, "non-finite feature"))
            continue
        try:
            label = int(row[-1].strip())
        except ValueError:
            masked.append(MaskedRow(line, opt, "non-integer label"))
            continue
        parsed_labels.append((line, opt, x, label))

    n_labels = schema.n_labels
    if n_labels is None:
        n_labels = max((lab for *_, lab in parsed_labels), default=0)
    for line, opt, x, label in parsed_labels:
        if not 1 <= label <= n_labels:
            masked.append(MaskedRow(line, opt, "label out of range"))
            continue
        xs, ys = groups.setdefault(opt, ([], []))
        xs.append(x)
        ys.append(label - 1)
    if not groups:
        raise DatasetError(f"{path}: every row was masked")

    masked.sort(key=lambda m: m.line)
    table = LabeledContextTable(
        option_ids=tuple(groups),
        features=tuple(np.array(xs) for xs, _ in groups.values()),
        labels=tuple(np.array(ys, dtype=np.int64) for _, ys in groups.values()),
        n_labels=int(n_labels),
        masked=tuple(masked),
    )
    if masked:
        log.warning("%s: masked %d row(s)", path, len(masked))
    if report:
        write_mask_report(table, path.with_name(path.name + ".masked.txt"))
    return table


def write_mask_report(table: LabeledContextTable, path) -> None:
    lines = [f"masked rows: {len(table.masked)}"]
    lines += [f"line {m.line}\toption {m.option}\t{m.reason}" for m in table.masked]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_table(table: LabeledContextTable, path) -> None:
    """Write the valid rows back out (labels 1-based, 17 significant digits)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(table.n_raw))
        for opt, xs, ys in zip(table.option_ids, table.features, table.labels):
            for x, y in zip(xs, ys):
                w.writerow([opt, *(format(v, ".17g") for v in x), int(y) + 1])


def synthesize_table(n_options: int = 3, n_labels: int = 4, n_raw: int = 6, rows_per_option: int = 400,
                     param_scale: float = 1.5, seed: int = 0) -> LabeledContextTable:
    """Draw a table from random linear-softmax ground truth; handy for demos and tests."""
    rng = np.random.default_rng(seed)
    feats, labs = [], []
    for _ in range(n_options):
        centre = rng.normal(size=n_raw)
        x = centre + rng.normal(size=(rows_per_option, n_raw))
        w = rng.normal(scale=param_scale, size=(n_labels, n_raw + 1))
        eta = np.hstack([x, np.ones((rows_per_option, 1))]) @ w.T
        p = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))
        u = rng.random(rows_per_option)
        y = np.minimum((np.cumsum(p, axis=1) <= u[:, None]).sum(axis=1), n_labels - 1)
        feats.append(x)
        labs.append(y.astype(np.int64))
    ids = tuple(str(k + 1) for k in range(n_options))
    return LabeledContextTable(ids, tuple(feats), tuple(labs), n_labels)


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaModel:
    """``components`` is ``(C_raw, C)`` with orthonormal columns."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    @property
    def explained_ratio(self) -> np.ndarray:
        total = self.explained_variance.sum()
        if total <= 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / total

    @property
    def cumulative_ratio(self) -> np.ndarray:
        return np.cumsum(self.explained_ratio)


def pca_fit(data, n_components: int) -> PcaModel:
    """Eigendecomposition of the pooled, mean-centred covariance.

    ``data`` is a table (all options pooled) or an ``(n, C_raw)`` array.
    Components are sorted by descending eigenvalue and signed so that their
    first non-negligible coordinate is positive.
    """
    x = data.pooled() if isinstance(data, LabeledContextTable) else np.atleast_2d(np.asarray(data, dtype=float))
    n, c_raw = x.shape
    if not 1 <= n_components <= c_raw <= n:
        raise ContractError(
            f"need 1 <= n_components ({n_components}) <= C_raw ({c_raw}) <= rows ({n})"
        )
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(vals, kind="stable")[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    for j in range(c_raw):
        col = vecs[:, j]
        lead = np.flatnonzero(np.abs(col) > 1e-12)
        if lead.size and col[lead[0]] < 0:
            vecs[:, j] = -col
    scale = vals[0] if vals[0] > 0 else 1.0
    rank = int(np.sum(vals > 1e-12 * scale))
    if rank < n_components:
        warnings.warn(
            f"data has rank {rank} < {n_components} components; zero-variance directions kept at the tail",
            RuntimeWarning,
            stacklevel=2,
        )
    return PcaModel(mean, vecs[:, :n_components].copy(), vals)


def pca_transform(model: PcaModel, x_raw) -> np.ndarray:
    x = np.asarray(x_raw, dtype=float)
    if x.shape[-1] != model.mean.size:
        raise ContractError(f"expected raw dimension {model.mean.size}, got {x.shape[-1]}")
    return (x - model.mean) @ model.components


def pca_inverse(model: PcaModel, z) -> np.ndarray:
    return model.mean + np.asarray(z, dtype=float) @ model.components.T


def transform_table(model: PcaModel, table: LabeledContextTable) -> LabeledContextTable:
    feats = tuple(pca_transform(model, x) for x in table.features)
    return LabeledContextTable(table.option_ids, feats, table.labels, table.n_labels, table.masked)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainOptions:
    learning_rate: float = 1e-2
    epochs: int = 200
    batch_size: int | None = None  # None = full batch
    train_frac: float = 0.8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.train_frac < 1:
            raise ContractError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        if self.epochs < 1 or not self.learning_rate > 0:
            raise ContractError("epochs must be >= 1 and learning_rate > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ContractError(f"batch_size must be positive, got {self.batch_size}")


@dataclass
class TrainReport:
    """Held-out diagnostics per option."""

    accuracy: np.ndarray
    confusion: np.ndarray  # (K, F, F), rows true, columns predicted
    best_epoch: np.ndarray
    losses: np.ndarray  # (K, epochs) training loss after each epoch
    biases: np.ndarray  # (K, F)
    split_seed: int
    bias_histogram: tuple = field(default=())

    def __post_init__(self):
        if not self.bias_histogram:
            counts, edges = np.histogram(self.biases.reshape(-1), bins=20)
            self.bias_histogram = (counts, edges)

    def to_dict(self) -> dict:
        counts, edges = self.bias_histogram
        return {
            "accuracy": self.accuracy.tolist(),
            "mean_accuracy": float(self.accuracy.mean()),
            "best_epoch": self.best_epoch.tolist(),
            "confusion": self.confusion.tolist(),
            "biases": self.biases.tolist(),
            "bias_histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
            "split_seed": self.split_seed,
        }


def _split(n: int, frac: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_train = min(max(int(round(frac * n)), 1), n - 1)
    return perm[:n_train], perm[n_train:]


def _design(x) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _loss_and_grad(w, z, y):
    """Mean cross-entropy and its gradient for row weights ``w`` of shape ``(F, C+1)``."""
    eta = z @ w.T
    lse = logsumexp(eta, axis=1)
    loss = float(np.mean(lse - eta[np.arange(y.size), y]))
    p = np.exp(eta - lse[:, None])
    p[np.arange(y.size), y] -= 1.0
    return loss, p.T @ z / y.size


def _fit_option(x_train, y_train, x_test, y_test, n_labels: int, opts: TrainOptions,
                rng: np.random.Generator, option: str):
    z_tr, z_te = _design(x_train), _design(x_test)
    w = np.zeros((n_labels, z_tr.shape[1]))
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    step = 0
    best_w, best_acc, best_epoch = w.copy(), -1.0, 0
    losses = np.empty(opts.epochs)
    n = y_train.size
    batch = n if opts.batch_size is None else min(opts.batch_size, n)
    for epoch in range(1, opts.epochs + 1):
        order = np.arange(n) if batch == n else rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss, g = _loss_and_grad(w, z_tr[idx], y_train[idx])
            if not np.isfinite(loss):
                raise DatasetError(f"option {option}: non-finite loss at epoch {epoch}")
            step += 1
            m = opts.beta1 * m + (1 - opts.beta1) * g
            v = opts.beta2 * v + (1 - opts.beta2) * g * g
            m_hat = m / (1 - opts.beta1 ** step)
            v_hat = v / (1 - opts.beta2 ** step)
            w = w - opts.learning_rate * m_hat / (np.sqrt(v_hat) + opts.eps)
        losses[epoch - 1], _ = _loss_and_grad(w, z_tr, y_train)
        if not np.isfinite(losses[epoch - 1]):
            raise DatasetError(f"option {option}: non-finite loss at epoch {epoch}")
        acc = float(np.mean(np.argmax(z_te @ w.T, axis=1) == y_test))
        if acc > best_acc:
            best_w, best_acc, best_epoch = w.copy(), acc, epoch
    return best_w, best_epoch, losses


def train_softmax(table: LabeledContextTable, opts: TrainOptions = TrainOptions()):
    """Fit one multinomial logistic model per option with Adam.

    Returns ``(params, report)`` where ``params`` is a list of
    :class:`SoftmaxParams` taken from the epoch with the best held-out
    accuracy.  The split of option ``k`` is drawn from ``default_rng([seed, k])``.
    """
    f = table.n_labels
    params, acc, conf, best, losses = [], [], [], [], []
    for k, (opt, x, y) in enumerate(zip(table.option_ids, table.features, table.labels)):
        if y.size < 5 * f:
            raise ContractError(f"option {opt} has {y.size} rows; need at least {5 * f}")
        rng = np.random.default_rng([opts.seed, k])
        tr, te = _split(y.size, opts.train_frac, rng)
        w, epoch, curve = _fit_option(x[tr], y[tr], x[te], y[te], f, opts, rng, opt)
        pred = np.argmax(_design(x[te]) @ w.T, axis=1)
        cm = np.zeros((f, f), dtype=np.int64)
        np.add.at(cm, (y[te], pred), 1)
        params.append(SoftmaxParams(w[:, :-1].copy(), w[:, -1].copy()))
        acc.append(np.trace(cm) / cm.sum())
        conf.append(cm)
        best.append(epoch)
        losses.append(curve)
    report = TrainReport(
        accuracy=np.array(acc),
        confusion=np.array(conf),
        best_epoch=np.array(best),
        losses=np.array(losses),
        biases=np.array([p.biases for p in params]),
        split_seed=opts.seed,
    )
    return params, report


def build_environment_from_training(params, table: LabeledContextTable, pool_size: int | None = None,
                                    seed: int = 0) -> Environment:
    """Environment whose pools are the (already transformed) rows of ``table``.

    ``pool_size`` caps each pool by taking evenly spaced rows, so construction
    involves no randomness.
    """
    if len(params) != table.n_options:
        raise ContractError(f"{len(params)} parameter blocks for {table.n_options} options")
    pools = []
    for k, x in enumerate(table.features):
        if x.shape[0] == 0:
            raise ContractError(f"option {table.option_ids[k]} has an empty pool")
        if pool_size is not None and x.shape[0] > pool_size:
            x = x[np.linspace(0, x.shape[0] - 1, pool_size).round().astype(int)]
        pools.append(x)
    flat = np.array([p.flatten() for p in params])
    return Environment(flat, tuple(pools), table.n_labels, seed=seed)


def train_pipeline(table: LabeledContextTable, n_components: int = 8, opts: TrainOptions = TrainOptions(),
                   pool_size: int | None = None):
    """PCA, per-option training and environment construction in one call."""
    pca = pca_fit(table, n_components)
    reduced = transform_table(pca, table)
    params, report = train_softmax(reduced, opts)
    env = build_environment_from_training(params, reduced, pool_size, seed=opts.seed)
    return env, pca, report


def save_report(report: TrainReport, pca: PcaModel | None, path) -> None:
    doc = report.to_dict()
    if pca is not None:
        doc["pca"] = {
            "n_components": pca.n_components,
            "explained_ratio": pca.explained_ratio.tolist(),
            "cumulative_ratio": pca.cumulative_ratio.tolist(),
        }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
