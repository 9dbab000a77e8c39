"""Command-line surface: metrics / run / scorer train / scorer score.

Config precedence is CLI flag > config file (key = value lines) > default.
Exit codes for `run`: 0 ok, 1 config error, 2 probe protocol error, 3 runtime
failure (the partial trace is preserved on disk).
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys

from .corpus import CorpusError, Dataset, EncodedCorpus, Template, load_many
from .lexical import mtld
from .metrics import MetricError, length_difficulty, loss_difficulty, score_difficulty, validate_metric_set
from .probe import NGramProbe, Probe, ProbeError
from .remote import external_probe
from .runner import Convergence, RunConfig, RunnerError, composition_report, convergence_report, run
from .scheduler import ScopeConfig, SchedulerError
from .scorer import ScorerConfig, ScorerError, load_scorer, save_scorer, train_scorer


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_metrics(text: str) -> tuple[str, ...]:
    return tuple(m.strip() for m in text.split(",") if m.strip())


# dest -> (coercion for config-file strings, default). Every one of these
# affects the output, so they all surface as flags below.
OPTIONS = {
    "metrics": (_parse_metrics, ("d1", "d2")),
    "probe": (str, None),
    "T": (int, 100),
    "s1": (float, 0.01),
    "p": (float, 2.0),
    "select": (str, "min"),
    "dedup": (_parse_bool, False),
    "refresh_ppl": (str, "selected"),
    "resort_window": (int, None),
    "convergence": (str, "all_exhausted"),
    "max_steps": (int, None),
    "n_portions": (int, 5),
    "lr": (float, 1e-5),
    "batch": (int, 4),
    "inner_iters": (int, 2),
    "label_smoothing": (float, 0.1),
    "upsample": (_parse_bool, True),
    "adv_weight": (float, 0.1),
    "seed": (int, 0),
    "out": (str, None),
    "jobs": (int, 1),
    "scorer": (str, None),
    "template": (str, None),
    "report_k": (int, 5000),
    "probe_timeout": (float, 60.0),
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", action="append", required=True, help="JSONL dataset (repeatable)")
    parser.add_argument("--source", action="append", default=None, help="source label, one per --dataset or one for all")
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("--probe", default=None, help="ngram:<order>[:<alpha>] | exec:<cmd> | tcp:<host>:<port>")
    parser.add_argument("--template", default=None, help="JSON rendering-template file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    parser.add_argument("--probe-timeout", type=float, default=None, help="seconds to wait on a remote probe")


def _add_scorer_opts(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n-portions", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--batch", type=int, default=None)
    parser.add_argument("--inner-iters", type=int, default=None)
    parser.add_argument("--label-smoothing", type=float, default=None)
    parser.add_argument("--upsample", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--adv-weight", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="campus", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_metrics = sub.add_parser("metrics", help="emit per-sample difficulty values as JSONL")
    _add_common(p_metrics)
    p_metrics.add_argument("--metrics", type=_parse_metrics, default=None, help="comma list from d1,d2,d3,d4")
    p_metrics.add_argument("--scorer", default=None, help="scorer checkpoint enabling d4")
    p_metrics.add_argument("--jobs", type=int, default=None, help="worker pool for the pure metrics")

    p_run = sub.add_parser("run", help="run the dynamic curriculum loop")
    _add_common(p_run)
    p_run.add_argument("--metrics", type=_parse_metrics, default=None)
    p_run.add_argument("--T", type=int, default=None, help="sub-curricula per schedule")
    p_run.add_argument("--s1", type=float, default=None, help="initial learning-scope fraction")
    p_run.add_argument("--p", type=float, default=None, help="scope progression exponent")
    p_run.add_argument("--select", choices=("min", "max", "random", "sequential"), default=None)
    p_run.add_argument("--dedup", action=argparse.BooleanOptionalAction, default=None)
    p_run.add_argument("--refresh-ppl", choices=("selected", "all"), default=None)
    p_run.add_argument("--resort-window", type=int, default=None)
    p_run.add_argument("--convergence", choices=("all_exhausted", "plateau", "max_steps"), default=None)
    p_run.add_argument("--max-steps", type=int, default=None)
    p_run.add_argument("--scorer", default=None, help="scorer checkpoint for d4 (else trained inline)")
    p_run.add_argument("--report-k", type=int, default=None, help="window for the composition report")
    _add_scorer_opts(p_run)

    p_scorer = sub.add_parser("scorer", help="train or apply the difficulty scoring model")
    scorer_sub = p_scorer.add_subparsers(dest="scorer_command", required=True)

    p_train = scorer_sub.add_parser("train", help="train R/D and write a checkpoint")
    _add_common(p_train)
    _add_scorer_opts(p_train)

    p_score = scorer_sub.add_parser("score", help="emit d4 for every sample under a checkpoint")
    _add_common(p_score)
    p_score.add_argument("--scorer", required=True, help="scorer checkpoint")

    return parser


def parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{line_no}: expected key = value")
            key, value = body.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


class Settings:
    """Flags merged over config file over defaults."""

    def __init__(self, args: argparse.Namespace):
        self._args = args
        self._file: dict[str, str] = {}
        if getattr(args, "config", None):
            self._file = parse_config_file(args.config)
            unknown = set(self._file) - set(OPTIONS)
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def get(self, dest: str):
        cli = getattr(self._args, dest, None)
        if cli is not None:
            return cli
        coerce, default = OPTIONS[dest]
        if dest in self._file:
            try:
                return coerce(self._file[dest])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"config key {dest}: {exc}") from exc
        return default

    def echo(self) -> dict:
        return {dest: self.get(dest) for dest in OPTIONS}


def _load_dataset(args) -> Dataset:
    return load_many(args.dataset, args.source or [])


def _build_corpus(args, settings: Settings) -> EncodedCorpus:
    template = Template.from_file(settings.get("template")) if settings.get("template") else Template()
    return EncodedCorpus.build(_load_dataset(args), template)


def _make_probe(spec: str | None, corpus: EncodedCorpus, settings: Settings, record=None) -> Probe | None:
    if spec is None:
        return None
    if spec.startswith("ngram:"):
        parts = spec.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"bad probe spec {spec!r}, expected ngram:<order>[:<alpha>]")
        try:
            order = int(parts[1])
            alpha = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError as exc:
            raise ConfigError(f"bad probe spec {spec!r}: {exc}") from exc
        return NGramProbe(vocab_size=corpus.vocab.size, order=order, alpha=alpha)
    if spec.startswith(("exec:", "tcp:")):
        return external_probe(spec, timeout=settings.get("probe_timeout"), record=record)
    raise ConfigError(f"unknown probe spec {spec!r}")


def _scorer_config(settings: Settings) -> ScorerConfig:
    return ScorerConfig(
        n_portions=settings.get("n_portions"),
        lr=settings.get("lr"),
        batch=settings.get("batch"),
        inner_iters=settings.get("inner_iters"),
        label_smoothing=settings.get("label_smoothing"),
        upsample=settings.get("upsample"),
        adv_weight=settings.get("adv_weight"),
        seed=settings.get("seed"),
    )


def _resolve_scorer(args, settings: Settings, corpus: EncodedCorpus, metric_set, probe_spec: str | None):
    """Load the checkpoint, or train inline on a scratch builtin probe."""
    if "d4" not in metric_set:
        return None
    path = settings.get("scorer")
    if path:
        mlp, _ = load_scorer(path)
        return mlp
    if probe_spec is None or not probe_spec.startswith("ngram:"):
        raise ConfigError("d4 with a remote probe needs --scorer CHECKPOINT (inline training only supports ngram probes)")
    scratch = _make_probe(probe_spec, corpus, settings)
    return train_scorer(corpus, scratch, _scorer_config(settings)).R


def _out_path(settings: Settings, name: str) -> str:
    out = settings.get("out")
    if out is None:
        raise ConfigError("--out DIRECTORY is required for this command")
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, name)


def _mtld_job(tokens: list[int]) -> float:
    return mtld(tokens)


def cmd_metrics(args, settings: Settings) -> int:
    corpus = _build_corpus(args, settings)
    probe = _make_probe(settings.get("probe"), corpus, settings)
    scorer = load_scorer(settings.get("scorer"))[0] if settings.get("scorer") else None

    wanted = settings.get("metrics")
    d3_on = probe is not None and "d3" in wanted
    d4_on = probe is not None and scorer is not None and "d4" in wanted

    ids = sorted(corpus.by_id)
    jobs = settings.get("jobs")
    if jobs > 1:
        with multiprocessing.get_context("fork").Pool(jobs) as pool:
            d2_values = pool.map(_mtld_job, [corpus.by_id[i].content_tokens for i in ids])
    else:
        d2_values = [_mtld_job(corpus.by_id[i].content_tokens) for i in ids]

    sink = open(_out_path(settings, "metrics.jsonl"), "w", encoding="utf-8") if settings.get("out") else sys.stdout
    try:
        for pos, sid in enumerate(ids):
            enc = corpus.by_id[sid]
            row = {
                "id": sid,
                "source": corpus.dataset.by_id(sid).source,
                "d1": length_difficulty(enc),
                "d2": d2_values[pos],
                "d3": loss_difficulty(enc, probe) if d3_on else None,
                "d4": score_difficulty(enc, probe, scorer) if d4_on else None,
            }
            sink.write(json.dumps(row) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    if probe is not None:
        probe.close()
    return 0


def cmd_run(args, settings: Settings) -> int:
    # configuration phase: any failure here is exit 1
    try:
        corpus = _build_corpus(args, settings)
        scope_cfg = ScopeConfig(s1=settings.get("s1"), p=settings.get("p"), T=settings.get("T"))
        metric_set = tuple(settings.get("metrics"))
        bad = set(metric_set) - {"d1", "d2", "d3", "d4"}
        if bad or not metric_set:
            raise ConfigError(f"--metrics must name a non-empty subset of d1,d2,d3,d4 (got {sorted(bad)})")
        conv = Convergence(mode=settings.get("convergence"), max_steps=settings.get("max_steps"))
        run_cfg = RunConfig(
            scope=scope_cfg,
            metrics=metric_set,
            policy=settings.get("select"),
            dedup=settings.get("dedup"),
            convergence=conv,
            refresh_ppl=settings.get("refresh_ppl"),
            resort_window=settings.get("resort_window"),
            seed=settings.get("seed"),
        )
        trace_path = _out_path(settings, "trace.jsonl")
        probe_spec = settings.get("probe")
        if probe_spec is None:
            raise ConfigError("run needs --probe")
    except (ConfigError, CorpusError, ScorerError, SchedulerError, RunnerError, ValueError, OSError) as exc:
        print(f"campus run: {exc}", file=sys.stderr)
        return 1

    probe = None
    try:
        probe = _make_probe(probe_spec, corpus, settings)
        scorer = _resolve_scorer(args, settings, corpus, metric_set, probe_spec)
    except ProbeError as exc:
        print(f"campus run: probe error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ScorerError, OSError, ValueError) as exc:
        print(f"campus run: {exc}", file=sys.stderr)
        return 1

    try:
        trace = run(corpus.dataset, probe, scorer, run_cfg, trace_path=trace_path, corpus=corpus)
        with open(_out_path(settings, "trace.meta.json"), "w", encoding="utf-8") as fh:
            json.dump(trace.metadata | {"settings": settings.echo()}, fh, indent=2)
        with open(_out_path(settings, "composition.json"), "w", encoding="utf-8") as fh:
            json.dump(composition_report(trace, corpus.dataset, settings.get("report_k")), fh, indent=2)
        with open(_out_path(settings, "convergence.csv"), "w", encoding="utf-8") as fh:
            fh.write(convergence_report(trace))
    except ProbeError as exc:
        print(f"campus run: probe error: {exc} (partial trace kept at {trace_path})", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime contract: trace preserved, exit 3
        print(f"campus run: runtime failure: {exc} (partial trace kept at {trace_path})", file=sys.stderr)
        return 3
    finally:
        if probe is not None:
            probe.close()

    trained = [s.loss for s in trace.steps if s.loss is not None]
    final_loss = trained[-1] if trained else float("nan")
    print(f"steps: {len(trace.steps)}  trained-steps: {len(trained)}  final-loss: {final_loss:.6f}")
    print(f"trace: {trace_path}")
    return 0


def cmd_scorer_train(args, settings: Settings) -> int:
    corpus = _build_corpus(args, settings)
    probe_spec = settings.get("probe") or "ngram:2"
    probe = _make_probe(probe_spec, corpus, settings)
    config = _scorer_config(settings)
    trained = train_scorer(corpus, probe, config)
    probe.close()
    ckpt = _out_path(settings, "scorer.json")
    save_scorer(ckpt, trained.R, config)
    with open(_out_path(settings, "scorer_losses.csv"), "w", encoding="utf-8") as fh:
        fh.write("round,inner_iter,model,loss\n")
        for rec in trained.history:
            fh.write(f"{rec.round},{rec.inner_iter},{rec.model},{rec.loss!r}\n")
    print(f"checkpoint: {ckpt}  history-entries: {len(trained.history)}")
    return 0


def cmd_scorer_score(args, settings: Settings) -> int:
    corpus = _build_corpus(args, settings)
    mlp, _ = load_scorer(args.scorer)
    probe = _make_probe(settings.get("probe") or "ngram:2", corpus, settings)
    sink = open(_out_path(settings, "scores.jsonl"), "w", encoding="utf-8") if settings.get("out") else sys.stdout
    try:
        for sid in sorted(corpus.by_id):
            d4 = score_difficulty(corpus.by_id[sid], probe, mlp)
            sink.write(json.dumps({"id": sid, "d4": d4}) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    probe.close()
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = Settings(args)
    except (ConfigError, OSError) as exc:
        print(f"campus: {exc}", file=sys.stderr)
        return 1

    if args.command == "run":
        return cmd_run(args, settings)

    # metrics and scorer subcommands: exit 1 on any failure
    try:
        if args.command == "metrics":
            return cmd_metrics(args, settings)
        if args.command == "scorer" and args.scorer_command == "train":
            return cmd_scorer_train(args, settings)
        if args.command == "scorer" and args.scorer_command == "score":
            return cmd_scorer_score(args, settings)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, CorpusError, MetricError, ScorerError, ProbeError, RunnerError, OSError, ValueError) as exc:
        print(f"campus {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
