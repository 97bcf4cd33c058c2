"""Evaluation harness: routing consistency, rating aggregation, robustness.

Consistency probes each seed and paraphrase in a fresh single-turn session
and compares the routed task against the hand label. Ratings arrive as CSV
(collection is out of scope) and are aggregated with Student-t 95% CIs from
an embedded quantile table. Robustness replays scripted adversarial
dialogues and asserts per-step expectations.
"""

from __future__ import annotations

import csv
import io
import json
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from . import analysis
from .core import OrchestratorError
from .service import SessionService

VALID_RATINGS = (20, 40, 60, 80, 100)
CHAT_LABEL = "chat"

# Two-sided 95% Student-t quantiles for df = 1..120; normal approximation beyond.
T_975 = (
    12.7062, 4.3027, 3.1824, 2.7764, 2.5706, 2.4469, 2.3646, 2.3060,
    2.2622, 2.2281, 2.2010, 2.1788, 2.1604, 2.1448, 2.1314, 2.1199,
    2.1098, 2.1009, 2.0930, 2.0860, 2.0796, 2.0739, 2.0687, 2.0639,
    2.0595, 2.0555, 2.0518, 2.0484, 2.0452, 2.0423, 2.0395, 2.0369,
    2.0345, 2.0322, 2.0301, 2.0281, 2.0262, 2.0244, 2.0227, 2.0211,
    2.0195, 2.0181, 2.0167, 2.0154, 2.0141, 2.0129, 2.0117, 2.0106,
    2.0096, 2.0086, 2.0076, 2.0066, 2.0057, 2.0049, 2.0040, 2.0032,
    2.0025, 2.0017, 2.0010, 2.0003, 1.9996, 1.9990, 1.9983, 1.9977,
    1.9971, 1.9966, 1.9960, 1.9955, 1.9949, 1.9944, 1.9939, 1.9935,
    1.9930, 1.9925, 1.9921, 1.9917, 1.9913, 1.9908, 1.9905, 1.9901,
    1.9897, 1.9893, 1.9890, 1.9886, 1.9883, 1.9879, 1.9876, 1.9873,
    1.9870, 1.9867, 1.9864, 1.9861, 1.9858, 1.9855, 1.9853, 1.9850,
    1.9847, 1.9845, 1.9842, 1.9840, 1.9837, 1.9835, 1.9833, 1.9830,
    1.9828, 1.9826, 1.9824, 1.9822, 1.9820, 1.9818, 1.9816, 1.9814,
    1.9812, 1.9810, 1.9808, 1.9806, 1.9804, 1.9803, 1.9801, 1.9799,
)
T_NORMAL = 1.96


def t_quantile_975(df: int) -> float:
    if df < 1:
        raise ValueError("df must be >= 1")
    return T_975[df - 1] if df <= len(T_975) else T_NORMAL


@dataclass
class SeedPrompt:
    prompt: str
    task_name: analysis.TaskKind


@dataclass
class RatingRecord:
    task_name: str
    paraphrase_id: str
    rater_id: str
    rating: int


@dataclass
class ScenarioStep:
    query: str
    uploads: list[str] = field(default_factory=list)
    expect: dict = field(default_factory=dict)


@dataclass
class ScenarioScript:
    category: str
    steps: list[ScenarioStep]


# --- probe targets ---------------------------------------------------------------

class InProcessTarget:
    """Runs probes against a SessionService without HTTP."""

    def __init__(self, service: SessionService | None = None):
        if service is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="audiohub-eval-")
            service = SessionService(self._tmp.name)
        self.service = service

    def new_session(self) -> str:
        return self.service.create_session().session_id

    def post(self, session_id: str, description: str, uploads: list[tuple[str, bytes]] = ()) -> dict:
        return self.service.post_turn(session_id, description, list(uploads)).to_dict()


class HttpTarget:
    def __init__(self, base_url: str):
        import httpx

        self._client = httpx.Client(base_url=base_url.rstrip("/"), timeout=30.0)

    def new_session(self) -> str:
        resp = self._client.post("/sessions", json={})
        resp.raise_for_status()
        return resp.json()["session_id"]

    def post(self, session_id: str, description: str, uploads: list[tuple[str, bytes]] = ()) -> dict:
        files = [("file", (name, payload)) for name, payload in uploads]
        resp = self._client.post(
            f"/sessions/{session_id}/turns", data={"description": description}, files=files or None,
        )
        resp.raise_for_status()
        return resp.json()


def _routed_task(turn: dict) -> str:
    args = turn.get("args")
    if args is None:
        return CHAT_LABEL
    return args["task"]


# --- consistency -----------------------------------------------------------------

def load_seeds(payload: bytes) -> list[SeedPrompt]:
    doc = json.loads(payload.decode("utf-8"))
    return [SeedPrompt(row["prompt"], analysis.TaskKind(row["task_name"])) for row in doc]


def default_seeds() -> list[SeedPrompt]:
    return load_seeds((analysis.DATA_DIR / "seeds.json").read_bytes())


def expand_seeds(seeds: list[SeedPrompt], k: int, engine=None) -> list[dict]:
    """k >= 1 paraphrases per seed; the corpus is JSON-serializable."""
    if k < 1:
        raise ValueError("k must be >= 1")
    engine = engine if engine is not None else analysis.BuiltinRuleEngine()
    corpus = []
    for seed in seeds:
        corpus.append({
            "prompt": seed.prompt,
            "task_name": seed.task_name.value,
            "paraphrases": engine.paraphrase(seed.prompt, k),
        })
    return corpus


def run_consistency(corpus: list[dict], target) -> dict:
    """Each seed and paraphrase goes through a fresh single-turn session."""
    per_task: dict[str, dict[str, int]] = {}
    confusions: dict[str, int] = {}
    probes = 0
    hits = 0
    failures: list[dict] = []
    aborted = False

    for row in corpus:
        expected = row["task_name"]
        for prompt in [row["prompt"]] + list(row.get("paraphrases", [])):
            try:
                session_id = target.new_session()
                turn = target.post(session_id, prompt)
            except Exception as exc:  # unreachable target: abort with a partial report
                failures.append({"prompt": prompt, "error": str(exc)})
                aborted = True
                break
            routed = _routed_task(turn)
            probes += 1
            stats = per_task.setdefault(expected, {"n": 0, "hits": 0})
            stats["n"] += 1
            if routed == expected:
                stats["hits"] += 1
                hits += 1
            else:
                confusions[f"{expected}->{routed}"] = confusions.get(f"{expected}->{routed}", 0) + 1
                failures.append({"prompt": prompt, "expected": expected, "routed": routed})
        if aborted:
            break

    report = {
        "probes": probes,
        "overall_accuracy": round(hits / probes, 6) if probes else 0.0,
        "per_task": {
            task: {"n": s["n"], "accuracy": round(s["hits"] / s["n"], 6)}
            for task, s in sorted(per_task.items())
        },
        "confusions": dict(sorted(confusions.items())),
        "failures": failures,
        "aborted": aborted,
    }
    return report


# --- rating aggregation -----------------------------------------------------------

def ingest_ratings(payload: bytes) -> tuple[list[RatingRecord], int]:
    """CSV columns: task_name,paraphrase_id,rater_id,rating. Returns (kept, rejected)."""
    rows = csv.reader(io.StringIO(payload.decode("utf-8")))
    records: list[RatingRecord] = []
    rejected = 0
    for row in rows:
        if not row or row[0].strip().lower() == "task_name":
            continue
        try:
            rating = int(row[3])
        except (IndexError, ValueError):
            rejected += 1
            continue
        if rating not in VALID_RATINGS:
            rejected += 1
            continue
        records.append(RatingRecord(row[0].strip(), row[1].strip(), row[2].strip(), rating))
    return records, rejected


def aggregate_ratings(records: list[RatingRecord]) -> dict:
    """Per-task mean with a 95% CI: mean +/- t(.975, n-1) * s / sqrt(n)."""
    by_task: dict[str, list[int]] = {}
    for rec in records:
        if rec.rating not in VALID_RATINGS:
            raise ValueError(f"rating {rec.rating} outside the 20..100 scale")
        by_task.setdefault(rec.task_name, []).append(rec.rating)
    out = {}
    for task, values in sorted(by_task.items()):
        n = len(values)
        mean = sum(values) / n
        if n == 1:
            out[task] = {"n": 1, "mean": round(mean, 4), "ci_low": None, "ci_high": None}
            continue
        var = sum((v - mean) ** 2 for v in values) / (n - 1)
        half = t_quantile_975(n - 1) * math.sqrt(var) / math.sqrt(n)
        out[task] = {
            "n": n,
            "mean": round(mean, 4),
            "ci_low": round(mean - half, 4),
            "ci_high": round(mean + half, 4),
        }
    return out


# --- robustness ------------------------------------------------------------------

def load_scenario(payload: bytes) -> ScenarioScript:
    doc = json.loads(payload.decode("utf-8"))
    steps = []
    for raw in doc["steps"]:
        step = ScenarioStep(raw["query"], list(raw.get("uploads", [])), dict(raw["expect"]))
        if not step.expect:
            raise ValueError(f"scenario step {raw['query']!r} has no expectation")
        steps.append(step)
    return ScenarioScript(doc["category"], steps)


def shipped_scenarios() -> list[ScenarioScript]:
    out = []
    for path in sorted((analysis.DATA_DIR / "scenarios").glob("*.json")):
        out.append(load_scenario(path.read_bytes()))
    return out


def _check_step(turn: dict, expect: dict) -> list[str]:
    problems = []
    if "task" in expect:
        routed = _routed_task(turn)
        if routed != expect["task"]:
            problems.append(f"routed {routed}, expected {expect['task']}")
    if "error_code" in expect:
        err = turn.get("error")
        code = err["code"] if err else None
        if code != expect["error_code"]:
            problems.append(f"error code {code}, expected {expect['error_code']}")
        if err and not err.get("suggestion"):
            problems.append("error has an empty suggestion")
    elif turn.get("error") is not None:
        problems.append(f"unexpected error {turn['error']['code']}: {turn['error']['message']}")
    if "text_contains" in expect:
        if expect["text_contains"] not in turn.get("response_text", ""):
            problems.append(f"response text lacks {expect['text_contains']!r}")
    if "attachment_kinds" in expect:
        kinds = [a["kind"] for a in turn.get("attachments", [])]
        for want in expect["attachment_kinds"]:
            if want not in kinds:
                problems.append(f"no {want} attachment (got {kinds})")
    return problems


def run_robustness(scripts: list[ScenarioScript], target, fixture_dir: Path | None = None) -> dict:
    results = []
    all_pass = True
    for script in scripts:
        session_id = target.new_session()
        for i, step in enumerate(script.steps, start=1):
            uploads = []
            for rel in step.uploads:
                base = fixture_dir if fixture_dir is not None else analysis.DATA_DIR / "demo"
                p = Path(rel) if Path(rel).is_absolute() else base / rel
                uploads.append((p.name, p.read_bytes()))
            turn = target.post(session_id, step.query, uploads)
            problems = _check_step(turn, step.expect)
            ok = not problems
            all_pass = all_pass and ok
            results.append({
                "category": script.category,
                "step": i,
                "query": step.query,
                "pass": ok,
                "problems": problems,
            })
    return {"all_pass": all_pass, "steps": results}
