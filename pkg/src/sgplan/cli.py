"""Command-line entry point: ``run``, ``eval`` and ``gen-scene``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .agent import AgentConfig, run_episode
from .gridworld import DEFAULT_RESOLUTION, SceneSpec, load_scene, load_scene_file, save_scene_file
from .language import ConfigError, LlmBackend, RecordingBackend, make_backend
from .scenes import TEMPLATES, bundled_suite, generate_scene
from .scenegraph import DEFAULT_LAMBDA
from .taskspec import EpisodeRecord, TaskSpec, compute_metrics, load_task_file, parse_task
from .voronoi import DEFAULT_SPARSIFY_C

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    scene: str | None = None
    tasks: list[str] = field(default_factory=list)
    suite: str | None = None
    backend: str = "rules"
    transcript: str | None = None
    record: str | None = None
    seed: int = 0
    max_steps: int = 50
    post_completion_cap: int = 5
    c: float = DEFAULT_SPARSIFY_C
    tau: float | None = None
    lam: float = DEFAULT_LAMBDA
    use_filter: bool = True
    refilter_every_step: bool = True
    resolution: float = DEFAULT_RESOLUTION
    out: str = "runs/latest"
    jobs: int = 1

    def validate(self) -> None:
        if (self.suite is None) == (self.scene is None):
            raise ConfigError("give either --suite or --scene (with --task)")
        if self.scene is not None and not self.tasks:
            raise ConfigError("--scene needs at least one --task")
        if self.suite is not None and self.suite != "bundled":
            raise ConfigError(f"unknown suite {self.suite!r}")
        if self.max_steps < 1 or self.post_completion_cap < 0 or self.jobs < 1:
            raise ConfigError("max_steps and jobs must be positive, post_completion_cap non-negative")
        if self.resolution != DEFAULT_RESOLUTION:
            raise ConfigError("only the bundled 0.075 m resolution is supported")

    def agent_config(self) -> AgentConfig:
        return AgentConfig(
            max_steps=self.max_steps,
            post_completion_cap=self.post_completion_cap,
            sparsify_c=self.c,
            tau=self.tau,
            lam=self.lam,
            use_filter=self.use_filter,
            refilter_every_step=self.refilter_every_step,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_toml(cls, path: str | Path) -> "RunConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


@dataclass
class Job:
    name: str
    scene_name: str
    spec: SceneSpec
    task: TaskSpec


def _scene_objects(spec: SceneSpec) -> dict[str, str]:
    cats = {o.id: o.category for o in spec.objects}
    cats.update({d.id: "door" for d in spec.doors})
    return cats


def collect_jobs(cfg: RunConfig) -> list[Job]:
    if cfg.suite == "bundled":
        jobs = []
        for entry in bundled_suite():
            scene_name = f"{entry.template}-seed{entry.seed}"
            jobs.append(Job(entry.name, scene_name, entry.scene(), parse_task(entry.task)))
        return jobs
    spec = load_scene_file(cfg.scene)
    objects = _scene_objects(spec)
    jobs = []
    for path in cfg.tasks:
        task = load_task_file(path, objects)
        jobs.append(Job(task.name, Path(cfg.scene).stem, spec, task))
    names = [j.name for j in jobs]
    if len(set(names)) != len(names):
        raise ConfigError("task names must be unique within a run")
    return jobs


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_run(cfg: RunConfig) -> int:
    cfg.validate()
    jobs = collect_jobs(cfg)
    base = make_backend(cfg.backend, tasks=[j.task for j in jobs], transcript=cfg.transcript)
    backend: LlmBackend = RecordingBackend(base) if cfg.record else base
    out = Path(cfg.out)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "records").mkdir(parents=True, exist_ok=True)
    agent_cfg = cfg.agent_config()

    def work(job: Job) -> EpisodeRecord:
        sim = load_scene(job.spec, cfg.seed)
        rel_log = f"logs/{job.name}.jsonl"
        record = run_episode(sim, job.task, backend, agent_cfg, log_path=out / rel_log)
        record.log_path = rel_log
        record.scene = job.scene_name
        record.seed = cfg.seed
        return record

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        records = list(pool.map(work, jobs))

    for job, record in zip(jobs, records):
        _write_json(out / "records" / f"{job.name}.json", record.to_dict())
    report = compute_metrics(records)
    _write_json(out / "metrics.json", report.to_dict())
    (out / "metrics.txt").write_text(report.to_text() + "\n")
    if cfg.record:
        backend.write(cfg.record)  # type: ignore[union-attr]
    manifest = {
        "config": cfg.to_dict(),
        "episodes": [
            {
                "task": j.name,
                "scene": j.scene_name,
                "record": f"records/{j.name}.json",
                "log": r.log_path,
                "terminated_by": r.terminated_by,
            }
            for j, r in zip(jobs, records)
        ],
        "metrics": ["metrics.json", "metrics.txt"],
    }
    _write_json(out / "manifest.json", manifest)
    print(report.to_text())
    faults = [r.task for r in records if r.terminated_by == "fault"]
    if faults:
        print(f"episodes ended in a fault: {', '.join(faults)}", file=sys.stderr)
        return 1
    return 0


def load_records(logdir: str | Path) -> list[EpisodeRecord]:
    logdir = Path(logdir)
    folder = logdir / "records" if (logdir / "records").is_dir() else logdir
    paths = sorted(p for p in folder.glob("*.json") if p.name not in ("manifest.json", "metrics.json"))
    if not paths:
        raise ConfigError(f"no episode records in {logdir}")
    return [EpisodeRecord.from_dict(json.loads(p.read_text())) for p in paths]


def cmd_eval(logdir: str | Path) -> int:
    report = compute_metrics(load_records(logdir))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    print(report.to_text())
    return 0


def cmd_gen_scene(template: str, seed: int, out: str | Path) -> list[Path]:
    if template not in TEMPLATES:
        raise ConfigError(f"unknown template {template!r}; choose from {', '.join(sorted(TEMPLATES))}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    spec = generate_scene(template, seed)
    load_scene(spec, seed)  # spawn must exist
    scene_path = out / f"{template}-seed{seed}.scene.json"
    save_scene_file(spec, scene_path)
    written = [scene_path]
    for entry in bundled_suite():
        if entry.template != template or entry.overrides:
            continue
        task_path = out / f"{entry.name}.task.json"
        task_path.write_text(json.dumps(entry.task, indent=2) + "\n")
        written.append(task_path)
    return written


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgplan", description="Scene-graph task planning in a grid world.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run episodes and write records, logs and metrics")
    run.add_argument("--config", help="TOML file with RunConfig keys; flags override it")
    run.add_argument("--scene")
    run.add_argument("--task", action="append", dest="tasks")
    run.add_argument("--suite", choices=["bundled"])
    run.add_argument("--backend", choices=["rules", "oracle", "http"])
    run.add_argument("--transcript", help="oracle transcript (JSON Lines) to replay")
    run.add_argument("--record", help="write a replayable transcript of every backend call")
    run.add_argument("--seed", type=int)
    run.add_argument("--max-steps", type=int)
    run.add_argument("--post-completion-cap", type=int)
    run.add_argument("--c", type=float, help="sparsification threshold in meters")
    run.add_argument("--tau", type=float, help="door-edge cut threshold")
    run.add_argument("--lam", type=float, help="object assignment exponent")
    run.add_argument("--no-filter", action="store_true", help="plan on the unfiltered scene graph")
    run.add_argument("--filter-once", action="store_true", help="filter only on the first step")
    run.add_argument("--out")
    run.add_argument("--jobs", type=int)

    ev = sub.add_parser("eval", help="recompute metrics from episode records")
    ev.add_argument("logdir")

    gen = sub.add_parser("gen-scene", help="write a template scene and its tasks")
    gen.add_argument("template")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", default=".")
    return p


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_toml(args.config) if args.config else RunConfig()
    overrides = {
        "scene": args.scene,
        "tasks": args.tasks,
        "suite": args.suite,
        "backend": args.backend,
        "transcript": args.transcript,
        "record": args.record,
        "seed": args.seed,
        "max_steps": args.max_steps,
        "post_completion_cap": args.post_completion_cap,
        "c": args.c,
        "tau": args.tau,
        "lam": args.lam,
        "out": args.out,
        "jobs": args.jobs,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.no_filter:
        cfg.use_filter = False
    if args.filter_once:
        cfg.refilter_every_step = False
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(config_from_args(args))
        if args.command == "eval":
            return cmd_eval(args.logdir)
        for path in cmd_gen_scene(args.template, args.seed, args.out):
            print(path)
        return 0
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
