"""Bit-stable file formats: experiment configs (flat JSON with one nested
agent block), per-run JSONL records, summary CSVs, and a versioned binary
policy format. All floats are emitted with 17 significant digits so that
64-bit values round-trip exactly; all writes are atomic (temp file + rename).
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from varlab.agent import AgentConfig
from varlab.bench import DiagWindow, RunRecord
from varlab.nets import OUTPUT_MODES, PENULT_MODES, Layer, LinearSchedule, MlpParams

CONFIG_SCHEMA = "varlab-config-v1"
RUN_SCHEMA = "varlab-run-v1"
SUMMARY_SCHEMA = "varlab-summary-v1"
CSV_SCHEMA = "varlab-csv-v1"

POLICY_MAGIC = b"VLPOLICY"
POLICY_VERSION = 1
_PENULT_MODES = PENULT_MODES
_OUTPUT_MODES = OUTPUT_MODES


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


# -- float-faithful JSON ------------------------------------------------------

def fmt_float(x: float) -> str:
    """17 significant digits: bit-faithful for 64-bit reals."""
    if x != x or x in (float("inf"), float("-inf")):
        raise ValueError(f"non-finite float {x} cannot be serialized")
    return format(float(x), ".17g")


def json_dumps(obj) -> str:
    """Deterministic JSON: sorted keys, 17-significant-digit floats."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        items = (f"{json.dumps(str(k))}: {json_dumps(v)}"
                 for k, v in sorted(obj.items()))
        return "{" + ", ".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(json_dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def atomic_write(path: str, data: str | bytes) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- experiment config --------------------------------------------------------

DESK_SCALE_NOTE = ("desk-scale defaults: total_steps 50000, eval_every 1000, "
                   "eval_episodes 10, seeds 20, noise schedule 25000, "
                   "warmup 2000, ssl 5000 — full-scale values divided by 20")


@dataclass
class ExperimentConfig:
    env: str = "pendulum"
    total_steps: int = 50_000
    eval_every: int = 1_000
    eval_episodes: int = 10
    seeds: int | list[int] = 20
    out_dir: str = "runs"
    agent: AgentConfig = field(default_factory=AgentConfig)

    def seed_list(self) -> list[int]:
        if isinstance(self.seeds, int):
            return list(range(self.seeds))
        return list(self.seeds)


def _agent_to_dict(cfg: AgentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["noise_sched"] = {"start": cfg.noise_sched.start,
                        "end": cfg.noise_sched.end,
                        "duration": cfg.noise_sched.duration}
    return d


def _agent_from_dict(d: dict) -> AgentConfig:
    known = {f.name for f in dataclasses.fields(AgentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown agent config keys: {sorted(unknown)}")
    kw = dict(d)
    if "noise_sched" in kw:
        ns = kw["noise_sched"]
        extra = set(ns) - {"start", "end", "duration"}
        if extra:
            raise ConfigError(f"unknown noise_sched keys: {sorted(extra)}")
        kw["noise_sched"] = LinearSchedule(ns["start"], ns["end"], ns["duration"])
    try:
        return AgentConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad agent config: {e}") from e


def config_to_json(cfg: ExperimentConfig) -> str:
    return json_dumps({
        "schema": CONFIG_SCHEMA,
        "note": DESK_SCALE_NOTE,
        "env": cfg.env,
        "total_steps": cfg.total_steps,
        "eval_every": cfg.eval_every,
        "eval_episodes": cfg.eval_episodes,
        "seeds": cfg.seeds,
        "out_dir": cfg.out_dir,
        "agent": _agent_to_dict(cfg.agent),
    }) + "\n"


_TOP_KEYS = {"schema", "note", "env", "total_steps", "eval_every",
             "eval_episodes", "seeds", "out_dir", "agent"}


def config_from_json(text: str) -> ExperimentConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    if d.get("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
        raise ConfigError(f"unknown config schema {d.get('schema')!r}")
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "env" not in d:
        raise ConfigError("missing env name")
    kw = {k: d[k] for k in ("env", "total_steps", "eval_every",
                            "eval_episodes", "seeds", "out_dir") if k in d}
    agent = _agent_from_dict(d.get("agent", {}))
    return ExperimentConfig(agent=agent, **kw)


def load_config(path: str) -> ExperimentConfig:
    with open(path) as f:
        return config_from_json(f.read())


def save_config(path: str, cfg: ExperimentConfig) -> None:
    atomic_write(path, config_to_json(cfg))


# -- run records --------------------------------------------------------------

def run_to_jsonl(rec: RunRecord) -> str:
    """One line per eval point plus one per diagnostics window."""
    lines = []
    for (step, mean), scores in zip(rec.curve, rec.eval_scores):
        lines.append(json_dumps({"schema": RUN_SCHEMA, "kind": "eval",
                                 "seed": rec.seed, "step": step,
                                 "mean": mean, "scores": scores}))
    for w in rec.diag:
        lines.append(json_dumps({"schema": RUN_SCHEMA, "kind": "diag",
                                 "seed": rec.seed, "step": w.step,
                                 "n_updates": w.n_updates,
                                 "frac_saturated": w.frac_saturated,
                                 "means": w.means}))
    return "\n".join(lines) + ("\n" if lines else "")


def run_summary_json(rec: RunRecord) -> str:
    return json_dumps({"schema": SUMMARY_SCHEMA, "seed": rec.seed,
                       "config_hash": rec.config_hash, "failed": rec.failed,
                       "fail_reason": rec.fail_reason,
                       "final_score": rec.final_score}) + "\n"


def load_run(jsonl_path: str) -> RunRecord:
    """Rebuild a RunRecord from run_<seed>.jsonl (+ sibling summary.json)."""
    curve, eval_scores, diag = [], [], []
    seed = 0
    with open(jsonl_path) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            if d.get("schema") != RUN_SCHEMA:
                raise ConfigError(f"unknown run schema {d.get('schema')!r}")
            seed = d["seed"]
            if d["kind"] == "eval":
                curve.append((d["step"], d["mean"]))
                eval_scores.append(d["scores"])
            else:
                diag.append(DiagWindow(step=d["step"],
                                       n_updates=d["n_updates"],
                                       means=d["means"],
                                       frac_saturated=d["frac_saturated"]))
    rec = RunRecord(seed=seed, config_hash="", curve=curve,
                    eval_scores=eval_scores, diag=diag)
    summary = jsonl_path.rsplit(".jsonl", 1)[0] + ".summary.json"
    if os.path.exists(summary):
        with open(summary) as f:
            s = json.load(f)
        if s.get("schema") != SUMMARY_SCHEMA:
            raise ConfigError(f"unknown summary schema {s.get('schema')!r}")
        rec.config_hash = s["config_hash"]
        rec.failed = s["failed"]
        rec.fail_reason = s["fail_reason"]
    return rec


# -- CSV ----------------------------------------------------------------------

def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    """CSV with a schema comment line and 17-significant-digit floats."""
    out = [f"# {CSV_SCHEMA}", ",".join(header)]
    for row in rows:
        out.append(",".join(fmt_float(v) if isinstance(v, float) else str(v)
                            for v in row))
    atomic_write(path, "\n".join(out) + "\n")


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != f"# {CSV_SCHEMA}":
        raise ConfigError(f"unknown CSV schema in {path}")
    header = lines[1].split(",")
    return header, [ln.split(",") for ln in lines[2:]]


# -- binary policy format -----------------------------------------------------

def save_policy(path: str, params: MlpParams) -> None:
    """magic, version, mode bytes, layer count, per-layer dims, then row-major
    64-bit little-endian weights and biases."""
    buf = [POLICY_MAGIC,
           struct.pack("<I", POLICY_VERSION),
           struct.pack("<BB", _PENULT_MODES.index(params.penult_mode),
                       _OUTPUT_MODES.index(params.output_mode)),
           struct.pack("<I", len(params.layers))]
    for lay in params.layers:
        buf.append(struct.pack("<II", lay.w.shape[0], lay.w.shape[1]))
    for lay in params.layers:
        buf.append(np.ascontiguousarray(lay.w, dtype="<f8").tobytes())
        buf.append(np.ascontiguousarray(lay.b, dtype="<f8").tobytes())
    atomic_write(path, b"".join(buf))


def load_policy(path: str) -> MlpParams:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != POLICY_MAGIC:
        raise ConfigError("not a policy file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != POLICY_VERSION:
        raise ConfigError(f"unsupported policy version {version}")
    pm, om = struct.unpack_from("<BB", data, 12)
    (n_layers,) = struct.unpack_from("<I", data, 14)
    off = 18
    dims = []
    for _ in range(n_layers):
        r, c = struct.unpack_from("<II", data, off)
        dims.append((r, c))
        off += 8
    layers = []
    for r, c in dims:
        w = np.frombuffer(data, dtype="<f8", count=r * c, offset=off)
        off += 8 * r * c
        b = np.frombuffer(data, dtype="<f8", count=r, offset=off)
        off += 8 * r
        layers.append(Layer(w.reshape(r, c).copy(), b.copy()))
    if off != len(data):
        raise ConfigError("policy file has trailing bytes")
    return MlpParams(layers, penult_mode=_PENULT_MODES[pm],
                     output_mode=_OUTPUT_MODES[om])
