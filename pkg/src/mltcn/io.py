"""Reading and writing datasets, roll-call votes, fits, grids and reports.

JSON documents are the lossless archival format (floats are written with
``repr`` precision, which round-trips exactly); CSV files are flat
presentation tables.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ecm import FitConfig, FitResult, VariationalState
from .exceptions import IoError, ParseError, VersionError
from .model import BinaryDataset, LatentAssignment, MltcnParams
from .selection import CellFailure, EvaluationReport, MedianProfiles, SelectionGrid

FORMAT_VERSION = 1

UNDECIDED = "?"
_VOTE_SYMBOLS = {"y": "y", "yes": "y", "n": "n", "no": "n",
                 "?": UNDECIDED, "undecided": UNDECIDED, "": UNDECIDED}


def _open_write(path):
    try:
        path = Path(path)
        return path.open("w", encoding="utf-8", newline="")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _open_read(path):
    try:
        return Path(path).open("r", encoding="utf-8", newline="")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


# -- binary CSV ---------------------------------------------------------------

def read_binary_csv(path, has_header=True, label_column=None):
    """Read a comma-separated 0/1 matrix.

    The header row (if any) names the variables. ``label_column`` (a header
    name, or a 0-based index when there is no header) is split off as the
    labels. Errors report 1-based file row and column.
    """
    with _open_read(path) as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file")
    header = None
    first = 1
    if has_header:
        header = [h.strip() for h in rows[0]]
        rows = rows[1:]
        first = 2
    width = len(header) if header is not None else len(rows[0]) if rows else 0
    if label_column is None:
        label_idx = None
    elif isinstance(label_column, int):
        label_idx = label_column
    else:
        if header is None or label_column not in header:
            raise ParseError(f"label column {label_column!r} not found")
        label_idx = header.index(label_column)
    values, labels = [], []
    for r, row in enumerate(rows, start=first):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} fields, found {len(row)}", row=r)
        out = []
        for col, cell in enumerate(row):
            if col == label_idx:
                labels.append(cell.strip())
                continue
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise ParseError(f"non-binary value {cell!r}", row=r, column=col + 1)
            out.append(int(cell))
        values.append(out)
    if not values:
        raise ParseError("no data rows")
    names = None
    if header is not None:
        names = [h for i, h in enumerate(header) if i != label_idx]
    return BinaryDataset(np.array(values, dtype=np.int8),
                         labels=np.array(labels) if label_idx is not None else None,
                         variable_names=names)


def write_binary_csv(dataset, path, label_column="label", header=True):
    """Write a dataset as CSV; labels, when present, go in the last column."""
    names = dataset.variable_names or [f"V{j + 1}" for j in range(dataset.m)]
    with _open_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow(list(names) + ([label_column] if dataset.labels is not None else []))
        for i, row in enumerate(dataset.responses):
            cells = [str(int(v)) for v in row]
            if dataset.labels is not None:
                cells.append(str(dataset.labels[i]))
            writer.writerow(cells)


# -- roll-call votes ------------------------------------------------------------

@dataclass(frozen=True)
class RawVoteTable:
    """Votes over ``{y, n, ?}`` with optional party labels."""

    votes: np.ndarray
    issue_names: tuple
    party: Optional[np.ndarray] = None

    def __post_init__(self):
        votes = np.asarray(self.votes, dtype=object)
        norm = np.empty(votes.shape, dtype="<U1")
        for (i, j), v in np.ndenumerate(votes):
            key = str(v).strip().lower()
            if key not in _VOTE_SYMBOLS:
                raise ParseError(f"unrecognised vote {v!r}", row=i + 1, column=j + 1)
            norm[i, j] = _VOTE_SYMBOLS[key]
        object.__setattr__(self, "votes", norm)
        object.__setattr__(self, "issue_names", tuple(self.issue_names))
        if len(self.issue_names) != norm.shape[1]:
            raise ValueError("one issue name per column is required")
        if self.party is not None:
            object.__setattr__(self, "party", np.asarray(self.party))

    def undecided_rate(self):
        return (self.votes == UNDECIDED).mean(axis=0)


def read_raw_votes(path, has_header=None, party_column="party"):
    """Read a roll-call CSV with ``y``/``n``/``?`` cells.

    Accepts the headerless UCI layout (party in the first column) and headed
    files with a ``party`` column. ``has_header=None`` sniffs the first row:
    it is a header unless every cell after the first is a vote symbol.
    """
    with _open_read(path) as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ParseError("empty file")
    if has_header is None:
        has_header = not all(cell.strip().lower() in _VOTE_SYMBOLS for cell in rows[0][1:])
    if has_header:
        header = [h.strip() for h in rows[0]]
        body = rows[1:]
        offset = 2
        party_idx = header.index(party_column) if party_column in header else None
    else:
        body = rows
        offset = 1
        first = {r[0].strip().lower() for r in body}
        party_idx = 0 if not first <= set(_VOTE_SYMBOLS) else None
        header = [party_column if i == party_idx else str(i) for i in range(len(body[0]))]
    width = len(header)
    issue_cols = [i for i in range(width) if i != party_idx]
    votes, party = [], []
    for r, row in enumerate(body, start=offset):
        if len(row) != width:
            raise ParseError(f"expected {width} fields, found {len(row)}", row=r)
        for j in issue_cols:
            if row[j].strip().lower() not in _VOTE_SYMBOLS:
                raise ParseError(f"unrecognised vote {row[j]!r}", row=r, column=j + 1)
        votes.append([row[j] for j in issue_cols])
        if party_idx is not None:
            party.append(row[party_idx].strip())
    if has_header:
        names = [header[j] for j in issue_cols]
    else:
        names = [str(k + 1) for k in range(len(issue_cols))]
    return RawVoteTable(np.array(votes, dtype=object), tuple(names),
                        np.array(party) if party_idx is not None else None)


def encode_votes(raw):
    """Expand each vote into two binaries, ordered ``1A, 1B, 2A, 2B, ...``.

    ``A`` is 1 when a vote was cast (yes or no), ``B`` is 1 only for yes.
    """
    votes = raw.votes
    n, q = votes.shape
    x = np.zeros((n, 2 * q), dtype=np.int8)
    x[:, 0::2] = votes != UNDECIDED
    x[:, 1::2] = votes == "y"
    names = [f"{k + 1}{s}" for k in range(q) for s in ("A", "B")]
    return BinaryDataset(x, labels=raw.party, variable_names=names)


def load_house_votes():
    """The bundled 1984 House of Representatives roll-call table (435 x 16)."""
    from importlib.resources import files

    path = files("mltcn") / "data" / "house-votes-84.csv"
    return read_raw_votes(path)


# -- JSON documents ---------------------------------------------------------------

def _finite_or_none(values):
    return [v if math.isfinite(v) else None for v in np.asarray(values, dtype=float).tolist()]


def _params_doc(params):
    return {"pi": params.pi.tolist(), "alpha": params.alpha.tolist(), "loadings": params.loadings.tolist(),
            "tau": params.tau.tolist(), "eta": params.eta.tolist()}


def _params_from(doc):
    return MltcnParams(pi=doc["pi"], alpha=doc["alpha"], loadings=doc["loadings"],
                       tau=doc["tau"], eta=doc["eta"])


def fit_to_dict(result, include_state=True):
    doc = {
        "format": "mltcn-fit",
        "format_version": FORMAT_VERSION,
        "config": {**asdict(result.config), "seed_key": list(result.config.seed_key)},
        "params": _params_doc(result.params),
        "bound_trace": result.bound_trace.tolist(),
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "bic": float(result.bic),
        "map_labels": result.map_labels.tolist(),
        "extreme_flags": result.extreme_flags.astype(bool).tolist(),
        "restart_bounds": _finite_or_none(result.restart_bounds),
        "restart_errors": [repr(e) for e in result.restart_errors],
        "resp": result.state.resp.tolist(),
        "normal_prob": result.state.normal_prob.tolist(),
    }
    if include_state:
        st = result.state
        doc["state"] = {"xi": st.xi.tolist(), "mu": st.mu.tolist(), "sigma": st.sigma.tolist(),
                        "logdet_sigma": st.logdet_sigma.tolist()}
        if st.branch_bounds is not None:
            doc["state"]["branch_bounds"] = st.branch_bounds.tolist()
            doc["state"]["component_bounds"] = st.component_bounds.tolist()
    return doc


def _check_version(doc, kind):
    if doc.get("format") != kind:
        raise VersionError(f"expected a {kind!r} document, got {doc.get('format')!r}")
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {doc.get('format_version')!r}"
                           f" (expected {FORMAT_VERSION})")


def fit_from_dict(doc):
    _check_version(doc, "mltcn-fit")
    cfg = dict(doc["config"])
    cfg["seed_key"] = tuple(cfg.get("seed_key", ()))
    st = doc.get("state")
    arr = (lambda key: np.array(st[key]) if st is not None and key in st else None)
    state = VariationalState(xi=arr("xi"), mu=arr("mu"), sigma=arr("sigma"),
                             logdet_sigma=arr("logdet_sigma"),
                             resp=np.array(doc["resp"]), normal_prob=np.array(doc["normal_prob"]),
                             branch_bounds=arr("branch_bounds"),
                             component_bounds=arr("component_bounds"))
    return FitResult(
        params=_params_from(doc["params"]), state=state,
        bound_trace=np.array(doc["bound_trace"], dtype=float),
        converged=bool(doc["converged"]), iterations=int(doc["iterations"]),
        bic=float(doc["bic"]), map_labels=np.array(doc["map_labels"], dtype=np.int64),
        extreme_flags=np.array(doc["extreme_flags"], dtype=bool),
        restart_bounds=np.array([-np.inf if v is None else v for v in doc["restart_bounds"]]),
        config=FitConfig(**cfg), restart_errors=tuple(doc.get("restart_errors", ())),
    )


def _dump(doc, path):
    with _open_write(path) as fh:
        json.dump(doc, fh, allow_nan=False)
        fh.write("\n")


def _load(path):
    with _open_read(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", row=exc.lineno, column=exc.colno) from exc


def write_fit(result, path, format="json", include_state=True, variable_names=None):
    """Write a fit as a JSON document or as a per-observation CSV table."""
    if format == "json":
        _dump(fit_to_dict(result, include_state), path)
    elif format == "csv":
        G = result.params.n_components
        with _open_write(path) as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["obs", "group", "extreme"] + [f"resp{g + 1}" for g in range(G)]
                            + [f"normal_prob{g + 1}" for g in range(G)])
            for i in range(result.map_labels.shape[0]):
                writer.writerow([i + 1, int(result.map_labels[i]) + 1, int(result.extreme_flags[i])]
                                + [repr(float(v)) for v in result.state.resp[i]]
                                + [repr(float(v)) for v in result.state.normal_prob[i]])
    else:
        raise ValueError(f"unknown format {format!r}")


def read_fit(path):
    return fit_from_dict(_load(path))


def write_grid(grid, path, format="json"):
    """Write a selection grid: JSON with every cell, or the BIC table as CSV."""
    if format == "csv":
        write_bic_table_csv(grid, path)
        return
    if format != "json":
        raise ValueError(f"unknown format {format!r}")
    cells = []
    for (G, D), cell in sorted(grid.cells.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        entry = {"G": G, "D": D}
        if isinstance(cell, CellFailure):
            entry["error"] = cell.error
        else:
            entry["bic"] = grid.bic_of((G, D))
            entry["fit"] = fit_to_dict(cell, include_state=False)
        cells.append(entry)
    _dump({"format": "mltcn-grid", "format_version": FORMAT_VERSION, "n": grid.n, "m": grid.m,
           "rotation_adjust": grid.rotation_adjust, "best": list(grid.best), "cells": cells}, path)


def read_grid(path):
    doc = _load(path)
    _check_version(doc, "mltcn-grid")
    cells = {}
    for entry in doc["cells"]:
        key = (int(entry["G"]), int(entry["D"]))
        cells[key] = (CellFailure(key[0], key[1], entry["error"]) if "error" in entry
                      else fit_from_dict(entry["fit"]))
    return SelectionGrid(cells=cells, best=tuple(doc["best"]), n=doc["n"], m=doc["m"],
                         rotation_adjust=doc["rotation_adjust"])


def report_to_dict(report):
    return {"format": "mltcn-report", "format_version": FORMAT_VERSION,
            "label_values": [str(v) for v in report.label_values],
            "cross_tab": report.cross_tab.tolist(), "rand": report.rand, "ari": report.ari,
            "n_extreme": report.n_extreme, "n_misclassified": report.n_misclassified,
            "matching": {str(k): str(v) for k, v in report.matching.items()}}


def write_report(report, path, format="json"):
    """Write an evaluation report; CSV gives the cross-tabulation only."""
    if format == "json":
        _dump(report_to_dict(report), path)
    elif format == "csv":
        G = report.cross_tab.shape[1]
        with _open_write(path) as fh:
            writer = csv.writer(fh, lineterminator="\n")
            head = ["label"]
            for g in range(G):
                head += [f"group{g + 1}", f"group{g + 1}_normal", f"group{g + 1}_extreme"]
            writer.writerow(head)
            for r, label in enumerate(report.label_values):
                row = [label]
                for g in range(G):
                    normal, extreme = report.cross_tab[r, g]
                    row += [int(normal + extreme), int(normal), int(extreme)]
                writer.writerow(row)
    else:
        raise ValueError(f"unknown format {format!r}")


def read_report(path):
    doc = _load(path)
    _check_version(doc, "mltcn-report")
    return EvaluationReport(label_values=doc["label_values"],
                            cross_tab=np.array(doc["cross_tab"], dtype=np.int64),
                            rand=doc["rand"], ari=doc["ari"], n_extreme=doc["n_extreme"],
                            n_misclassified=doc["n_misclassified"], matching=doc["matching"])


# -- presentation tables -------------------------------------------------------------

def write_bic_table_csv(grid, path):
    """BIC grid with one row per latent dimension and one column per G."""
    table = grid.bic_table()
    with _open_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([""] + [f"G={g}" for g in grid.g_values])
        for d, row in zip(grid.d_values, table):
            writer.writerow([f"D={d}"] + ["" if np.isnan(v) else f"{v:.2f}" for v in row])


def write_profiles_csv(profiles: MedianProfiles, path, group: Optional[int] = None):
    """Response-probability tables: median, normal-weighted and extreme-weighted rates."""
    G, M = profiles.median.shape
    names = profiles.variable_names or [f"V{j + 1}" for j in range(M)]
    groups = range(G) if group is None else [group]
    with _open_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["group", "variable", "median", "normal", "extreme"])
        for g in groups:
            for j in range(M):
                fmt = (lambda arr: "" if arr is None or np.isnan(arr[g, j]) else f"{arr[g, j]:.4f}")
                writer.writerow([g + 1, names[j], f"{profiles.median[g, j]:.4f}",
                                 fmt(profiles.normal), fmt(profiles.extreme)])


def write_curve_csv(rows: Sequence[dict], path):
    """Plot-ready series, e.g. mean BIC and mean ARI against G."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    with _open_write(path) as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_truth(truth: LatentAssignment, params: MltcnParams, path, seed=None):
    """Ground truth of a simulated dataset as JSON."""
    _dump({"format": "mltcn-truth", "format_version": FORMAT_VERSION, "seed": seed,
           "params": _params_doc(params), "groups": truth.groups.tolist(),
           "normal": truth.normal_hard.astype(bool).tolist(), "trait": truth.trait.tolist()}, path)


def read_truth(path):
    doc = _load(path)
    _check_version(doc, "mltcn-truth")
    return doc
