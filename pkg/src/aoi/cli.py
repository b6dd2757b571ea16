"""
Command-line front end.

Every command reads one JSON config whose ``command`` field names the
command::

    aoi exact-bias --config c.json
    aoi simulate   --config c.json
    aoi twoblock   --config c.json
    aoi estimate   --data d.csv --config c.json

Output is CSV on stdout (or ``--output``); ``--format markdown`` prints a
table for reading by eye. Numbers carry six significant digits. Exit codes:
0 success, 2 invalid config or input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import mc, population, twoblock
from .discretize import grid_from_config
from .estimator import (EigenSolverError, MemoryBudgetExceeded, Regularization, ZeroPredictive,
                        aoi_estimates)
from .model import OutcomeSpaceOverflow, UnknownOutcome, effect_from_id, model_from_config

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schemas
# ---------------------------------------------------------------------------

_Q = {'oneOf': [{'type': 'integer', 'minimum': 0}, {'const': 'inf'}]}
_REG = {'oneOf': [
    {'type': 'string', 'pattern': r'^(none|(truncate|clamp)@[0-9.eE+-]+)$'},
    {'type': 'object', 'required': ['mode'], 'additionalProperties': False,
     'properties': {'mode': {'enum': ['none', 'truncate', 'clamp']},
                    'lambda_min': {'type': 'number', 'exclusiveMinimum': 0}}},
]}
_DIST = {'type': 'object', 'required': ['family'], 'properties': {
    'family': {'enum': ['logistic', 'normal', 'uniform']},
    'location': {'type': 'number'}, 'scale': {'type': 'number', 'exclusiveMinimum': 0},
    'mean': {'type': 'number'}, 'variance': {'type': 'number', 'exclusiveMinimum': 0},
    'lo': {'type': 'number'}, 'hi': {'type': 'number'}}, 'additionalProperties': False}
_GRID = {'type': 'object', 'properties': {
    'dims': {'type': 'array', 'items': _DIST, 'minItems': 1, 'maxItems': 2},
    'dist': _DIST,
    'K': {'oneOf': [{'type': 'integer', 'minimum': 1},
                    {'type': 'array', 'items': {'type': 'integer', 'minimum': 1}}]},
    'percentile_rule': {'enum': ['k+1', 'midpoint']}},
    'required': ['K'], 'oneOf': [{'required': ['dims']}, {'required': ['dist']}]}
_OUT = {'output': {'type': 'string'}, 'format': {'enum': ['csv', 'markdown']}}

SCHEMAS = {
    'exact-bias': {
        'type': 'object', 'required': ['command', 'scenario', 'T_list'], 'additionalProperties': False,
        'properties': {
            'command': {'const': 'exact-bias'},
            'scenario': {'enum': [1, 2, 3]},
            'T_list': {'type': 'array', 'minItems': 1,
                       'items': {'type': 'integer', 'minimum': 2, 'multipleOf': 2}},
            'q_list': {'type': 'array', 'minItems': 1, 'items': _Q},
            'reg': {'oneOf': [_REG, {'type': 'array', 'minItems': 1, 'items': _REG}]},
            'K': {'type': 'integer', 'minimum': 1},
            'percentile_rule': {'enum': ['k+1', 'midpoint']},
            **_OUT}},
    'simulate': {
        'type': 'object', 'required': ['command'], 'additionalProperties': False,
        'properties': {
            'command': {'const': 'simulate'},
            'n': {'type': 'integer', 'minimum': 1},
            'T': {'type': 'integer', 'minimum': 1},
            'reps': {'type': 'integer', 'minimum': 1},
            'seed': {'type': 'integer', 'minimum': 0, 'maximum': 2 ** 64 - 1},
            'prior': {'oneOf': [{'enum': [1, 2, 3]}, _GRID]},
            'effects': {'type': 'array', 'minItems': 1,
                        'items': {'type': 'string', 'pattern': r'^(ape(:[0-9]+)?|cf_prob:[0-9.eE+-]+)$'}},
            'q_list': {'type': 'array', 'minItems': 1, 'items': _Q},
            'reg': _REG,
            'L': {'type': 'integer', 'minimum': 1},
            'level': {'type': 'number', 'exclusiveMinimum': 0, 'exclusiveMaximum': 1},
            'dgp': {'type': 'object', 'additionalProperties': False, 'properties': {
                k: {'type': 'number'} for k in ('a1_mean', 'a1_sd', 'a2_mean', 'a2_sd', 'x_sd')}},
            **_OUT}},
    'twoblock': {
        'type': 'object', 'required': ['command', 'T_list'], 'additionalProperties': False,
        'properties': {
            'command': {'const': 'twoblock'},
            'T_list': {'type': 'array', 'minItems': 1,
                       'items': {'type': 'integer', 'minimum': 2, 'multipleOf': 2}},
            'eps': {'type': 'number', 'exclusiveMinimum': 0, 'exclusiveMaximum': 0.5},
            'n_grid': {'type': 'integer', 'minimum': 2},
            'precision': {'enum': ['auto', 'double', 'mp']},
            **_OUT}},
    'estimate': {
        'type': 'object', 'required': ['command', 'model', 'prior', 'effect'], 'additionalProperties': False,
        'properties': {
            'command': {'const': 'estimate'},
            'model': {'type': 'object', 'required': ['id'], 'properties': {
                'id': {'type': 'string'}, 'T': {'type': 'integer', 'minimum': 1},
                'link': {'enum': ['logistic', 'logit', 'probit', 'normal']},
                'beta': {'type': 'array', 'items': {'type': 'number'}},
                'collapse': {'type': 'boolean'}}},
            'prior': {'oneOf': [{'enum': [1, 2, 3]}, _GRID]},
            'L': {'type': 'integer', 'minimum': 1},
            'effect': {'type': 'string'},
            'q': {'oneOf': [_Q, {'type': 'array', 'minItems': 1, 'items': _Q}]},
            'reg': _REG,
            'level': {'type': 'number', 'exclusiveMinimum': 0, 'exclusiveMaximum': 1},
            **_OUT}},
}


def _path(err: jsonschema.ValidationError) -> str:
    parts = ''.join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
    return 'config' + parts


def validate_config(cfg: dict, command: Optional[str] = None) -> dict:
    """Check ``cfg`` against its command schema; errors name the offending field."""
    if not isinstance(cfg, dict):
        raise ConfigError("config: must be a JSON object")
    cmd = cfg.get('command')
    if cmd not in SCHEMAS:
        raise ConfigError(f"config.command: must be one of {sorted(SCHEMAS)}, got {cmd!r}")
    if command is not None and cmd != command:
        raise ConfigError(f"config.command: {cmd!r} does not match the '{command}' subcommand")
    errors = sorted(jsonschema.Draft7Validator(SCHEMAS[cmd]).iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        best = jsonschema.exceptions.best_match(errors)
        raise ConfigError(f"{_path(best)}: {best.message}")
    return cfg


def load_config(path: str, command: Optional[str] = None) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return validate_config(cfg, command)


# ---------------------------------------------------------------------------
# formatting
# ---------------------------------------------------------------------------

def fmt(v) -> str:
    """Six significant digits; NaN is left empty, infinities spelled out."""
    if v is None:
        return ''
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return ''
        if math.isinf(v):
            return 'inf' if v > 0 else '-inf'
        return '{:.6g}'.format(v)
    return str(v)


def render(rows: Sequence[dict], columns: Sequence[str], fmt_name: str = 'csv',
           comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    if fmt_name == 'markdown':
        buf.write('| ' + ' | '.join(columns) + ' |\n')
        buf.write('|' + '|'.join('---' for _ in columns) + '|\n')
        for r in rows:
            buf.write('| ' + ' | '.join(fmt(r.get(c)) for c in columns) + ' |\n')
    else:
        w = csv.writer(buf, lineterminator='\n')
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _q(v) -> float:
    return math.inf if v == 'inf' else int(v)


def _regs(value) -> list:
    if value is None:
        return [Regularization()]
    return [Regularization.parse(s) for s in (value if isinstance(value, list) else [value])]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

EXACT_COLUMNS = ['T', 'q', 'reg_mode', 'bias', 'asd', 'mu0', 'thm1_bias', 'cs_bound']
SIM_COLUMNS = ['effect', 'prior', 'T', 'q', 'bias', 'sd', 'se_sd_ratio', 'coverage95']
TWOBLOCK_COLUMNS = ['T', 'eps', 'sup_bias', 'fitted_slope']
ESTIMATE_COLUMNS = ['q', 'estimate', 'se', 'ci_lo', 'ci_hi', 'sigma2_hat', 'n']


def cmd_exact_bias(cfg: dict) -> tuple:
    """Rows ``(T, q, reg, bias, asd, ...)`` for a two-block scenario."""
    validate_config(cfg, 'exact-bias')
    qs = [_q(v) for v in cfg.get('q_list', [0, 1, 10, 'inf'])]
    regs = _regs(cfg.get('reg'))
    grids = population.scenario_grids(cfg.get('K', 1000), cfg.get('percentile_rule', 'k+1'))
    rows = []
    for T in cfg['T_list']:
        sc = population.two_block_scenario(cfg['scenario'], T, truth_grids=grids)
        for reg in regs:
            res = population.exact_analysis(sc.model, sc.design, sc.prior_grid, sc.effect, qs, reg)
            for q in qs:
                pa = res[q]
                rows.append({'T': T, 'q': q, 'reg_mode': str(reg), 'bias': pa.bias, 'asd': pa.asd,
                             'mu0': pa.mu0, 'thm1_bias': pa.thm1_bias, 'cs_bound': pa.cs_bound})
    return rows, EXACT_COLUMNS, []


def study_config(cfg: dict) -> mc.StudyConfig:
    kw = {k: cfg[k] for k in ('n', 'T', 'reps', 'seed', 'prior', 'L', 'level') if k in cfg}
    if 'effects' in cfg:
        kw['effects'] = tuple(cfg['effects'])
    if 'q_list' in cfg:
        kw['q_list'] = tuple(_q(v) for v in cfg['q_list'])
    if 'reg' in cfg:
        kw['reg'] = Regularization.parse(cfg['reg'])
    if 'dgp' in cfg:
        kw['dgp'] = mc.DGP.from_config(cfg['dgp'])
    return mc.StudyConfig(**kw)


def cmd_simulate(cfg: dict) -> tuple:
    validate_config(cfg, 'simulate')
    sc = study_config(cfg)
    res = mc.run_study(sc)
    echo = json.dumps(sc.echo(), sort_keys=True)
    comments = [f"config: {echo}", f"truths: {json.dumps({k: float(fmt(v)) for k, v in res.truths.items()}, sort_keys=True)}",
                f"failures: {res.failures}"]
    return res.rows(), SIM_COLUMNS, comments


def cmd_twoblock(cfg: dict) -> tuple:
    validate_config(cfg, 'twoblock')
    r = twoblock.sweep(cfg['T_list'], cfg.get('eps', twoblock.DEFAULT_EPS), cfg.get('n_grid', 41),
                       cfg.get('precision', 'auto'))
    return r.rows(), TWOBLOCK_COLUMNS, []


def read_panel_csv(path: str) -> tuple:
    """
    Long-format panel ``unit_id, t, y, x1..xk`` to per-unit arrays.

    Returns
    -------
    unit_ids : list of str
    Y : list of (T,) int arrays
    X : list of (T, k) float arrays
    """
    try:
        fh = open(path, newline='')
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        if header[:3] != ['unit_id', 't', 'y']:
            raise ConfigError(f"{path}: line 1: header must start with unit_id,t,y, got {','.join(header[:3])}")
        xcols = header[3:]
        if xcols != [f"x{j + 1}" for j in range(len(xcols))]:
            raise ConfigError(f"{path}: line 1: covariate columns must be x1..xk in order")
        units: dict = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                t = int(row[1])
                y = int(row[2])
                xs = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise ConfigError(f"{path}: line {lineno}: {exc}") from None
            if y not in (0, 1):
                raise ConfigError(f"{path}: line {lineno}: outcome must be 0 or 1, got {y}")
            rec = units.setdefault(row[0], {})
            if t in rec:
                raise ConfigError(f"{path}: line {lineno}: duplicate period {t} for unit {row[0]}")
            rec[t] = (y, xs)
    if not units:
        raise ConfigError(f"{path}: no data rows")
    ids, Y, X = [], [], []
    T = None
    for uid, rec in units.items():
        ts = sorted(rec)
        if T is None:
            T = len(ts)
        if len(ts) != T or ts != list(range(ts[0], ts[0] + T)):
            raise ConfigError(f"{path}: unit {uid}: periods must be {T} consecutive integers, got {ts}")
        ids.append(uid)
        Y.append(np.array([rec[t][0] for t in ts], dtype=np.int8))
        X.append(np.array([rec[t][1] for t in ts], dtype=float).reshape(T, len(xcols)))
    return ids, Y, X


def write_panel_csv(path: str, Y, X) -> None:
    """Inverse of :func:`read_panel_csv` with exact (``repr``) covariates."""
    with open(path, 'w', newline='') as fh:
        w = csv.writer(fh, lineterminator='\n')
        X0 = np.asarray(X[0], dtype=float).reshape(len(Y[0]), -1)
        w.writerow(['unit_id', 't', 'y'] + [f"x{j + 1}" for j in range(X0.shape[1])])
        for i, (y, x) in enumerate(zip(Y, X)):
            x = np.asarray(x, dtype=float).reshape(len(y), -1)
            for t in range(len(y)):
                w.writerow([i, t + 1, int(y[t])] + [repr(float(v)) for v in x[t]])


def _unit_covariates(model_id: str, x: np.ndarray):
    if model_id.startswith('rc_binary'):
        if x.shape[1] != 1:
            raise ConfigError(f"model {model_id} takes exactly one covariate column, got {x.shape[1]}")
        return x[:, 0]
    if model_id.startswith('binomial'):
        return None
    return x


def cmd_estimate(cfg: dict, data_path: str) -> tuple:
    validate_config(cfg, 'estimate')
    ids, Y, X = read_panel_csv(data_path)
    mcfg = dict(cfg['model'])
    mcfg.setdefault('T', len(Y[0]))
    if mcfg['T'] != len(Y[0]):
        raise ConfigError(f"config.model.T: {mcfg['T']} does not match the {len(Y[0])} periods in the data")
    try:
        model = model_from_config(mcfg)
        effect = effect_from_id(cfg['effect'], model)
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from None
    prior = cfg['prior']
    if isinstance(prior, int):
        grid = mc.prior_grid(prior, cfg.get('L', 99))
    else:
        grid = grid_from_config(prior)
    if grid.d_a != model.d_a:
        raise ConfigError(f"config.prior: grid dimension {grid.d_a} does not match the model's {model.d_a}")
    qs = cfg.get('q', 'inf')
    qs = [_q(v) for v in (qs if isinstance(qs, list) else [qs])]
    reg = Regularization.parse(cfg.get('reg'))
    data = [(y, _unit_covariates(mcfg['id'], x)) for y, x in zip(Y, X)]
    try:
        reports = aoi_estimates(data, model, grid, effect, qs, reg, cfg.get('level', 0.95))
    except UnknownOutcome as exc:
        raise ConfigError(str(exc)) from None
    rows = []
    for q, r in reports.items():
        rows.append({'q': q, 'estimate': r.estimate, 'se': r.se, 'ci_lo': r.ci[0], 'ci_hi': r.ci[1],
                     'sigma2_hat': r.sigma2_hat, 'n': r.n})
    comments = [f"model: {model.name} T={model.T}", f"effect: {effect.name}", f"prior_grid: K={grid.K}",
                f"regularization: {reg}", f"level: {cfg.get('level', 0.95)}"]
    return rows, ESTIMATE_COLUMNS, comments


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog='aoi', description="Average effects in nonlinear panels by "
                                "approximate operator inversion.")
    sub = p.add_subparsers(dest='command', required=True)
    for name, help_ in [('exact-bias', 'exact population bias and s.d. for the two-block scenarios'),
                        ('simulate', 'Monte Carlo study with a continuous covariate'),
                        ('twoblock', 'bias of the explicit Chebyshev estimator over T'),
                        ('estimate', 'estimate an average effect from a panel CSV')]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument('--config', required=True, help='JSON config file')
        if name == 'estimate':
            sp.add_argument('--data', required=True, help='long-format CSV: unit_id,t,y,x1..xk')
        sp.add_argument('--output', help='write the table here instead of stdout')
        sp.add_argument('--format', choices=['csv', 'markdown'], help='table format (default csv)')
    return p


NUMERIC_ERRORS = (ZeroPredictive, EigenSolverError, np.linalg.LinAlgError, FloatingPointError,
                  MemoryBudgetExceeded, mc.QuadratureError, OutcomeSpaceOverflow)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command)
        if args.command == 'exact-bias':
            rows, cols, comments = cmd_exact_bias(cfg)
        elif args.command == 'simulate':
            rows, cols, comments = cmd_simulate(cfg)
        elif args.command == 'twoblock':
            rows, cols, comments = cmd_twoblock(cfg)
        else:
            rows, cols, comments = cmd_estimate(cfg, args.data)
    except ConfigError as exc:
        print(f"aoi: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NUMERIC_ERRORS as exc:
        print(f"aoi: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    text = render(rows, cols, args.format or cfg.get('format', 'csv'), comments)
    out = args.output or cfg.get('output')
    if out:
        with open(out, 'w') as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
