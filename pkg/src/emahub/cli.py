"""Operator command line: run the service, validate flows, import sensor
files, run fusion exports, and dry-run a day of notifications.

Exit codes: 0 success, 1 validation failure, 2 usage error, 3 I/O failure.
"""
from __future__ import annotations

import json
import signal
import sys
import threading
from datetime import date as date_type
from pathlib import Path

import click

from . import defaults, flows, fusion, notify, sensors
from .config import ConfigError, ServiceConfig, load_config
from .registry import predicates_from_json
from .store import StreamStore
from .timeutil import format_utc_ms

EXIT_VALIDATION = 1
EXIT_IO = 3


class Ctx:
    def __init__(self, config: ServiceConfig, output_format: str):
        self.config = config
        self.format = output_format

    def emit(self, doc: dict, text: str) -> None:
        click.echo(json.dumps(doc, ensure_ascii=False, indent=2)
                   if self.format == "json" else text)


@click.group()
@click.option("--config", "config_path", type=click.Path(path_type=Path),
              default=None, help="JSON config file (or $EMAHUB_CONFIG).")
@click.option("--data-dir", type=click.Path(path_type=Path), default=None,
              help="Data directory holding streams, registry, and surveys.")
@click.option("--format", "output_format", type=click.Choice(["text", "json"]),
              default="text", help="Human or machine-readable output.")
@click.pass_context
def main(ctx: click.Context, config_path: Path | None, data_dir: Path | None,
         output_format: str) -> None:
    """Self-hostable right-now survey platform."""
    try:
        config = load_config(config_path, data_dir=data_dir)
    except ConfigError as exc:
        raise click.ClickException(str(exc))
    ctx.obj = Ctx(config, output_format)


@main.command()
@click.option("--bind", default=None, help="host:port to listen on.")
@click.option("--keystore", type=click.Path(path_type=Path), default=None,
              help="API key store JSON file.")
@click.option("--rules", "rules_path", type=click.Path(path_type=Path),
              default=None, help="Notification rules file.")
@click.option("--webhook-url", default=None,
              help="Push provider webhook URL (defaults to the log provider).")
@click.option("--poll-seconds", default=30.0, show_default=True,
              help="Scheduler evaluation interval.")
@click.pass_obj
def serve(ctx: Ctx, bind: str | None, keystore: Path | None,
          rules_path: Path | None, webhook_url: str | None,
          poll_seconds: float) -> None:
    """Run the HTTP service and the notification scheduler until signaled."""
    import uvicorn

    from .service import create_app

    config = ctx.config
    if bind:
        config.bind = bind
    if keystore:
        config.keystore_path = keystore
    if rules_path:
        config.rules_path = rules_path

    eligibility_path = config.data_dir / "eligibility.json"
    if eligibility_path.exists():
        eligibility = predicates_from_json(json.loads(eligibility_path.read_text("utf-8")))
    else:
        eligibility = defaults.example_eligibility()

    try:
        app = create_app(config, eligibility=eligibility)
    except Exception as exc:
        raise click.ClickException(f"cannot start service: {exc}")
    state = app.state.hub

    provider = notify.WebhookProvider(webhook_url) if webhook_url else notify.LogProvider()
    resolved_rules = config.resolved_rules()
    rules = notify.load_rules_file(resolved_rules) if resolved_rules else []
    scheduler = notify.NotificationScheduler(state.store, state.registry, rules,
                                             provider)

    def reload_rules(_signum, _frame) -> None:
        if resolved_rules:
            try:
                scheduler.reload_rules(notify.load_rules_file(resolved_rules))
            except Exception as exc:
                click.echo(f"rules reload failed: {exc}", err=True)

    if hasattr(signal, "SIGHUP"):
        signal.signal(signal.SIGHUP, reload_rules)

    worker = threading.Thread(target=scheduler.run, args=(poll_seconds,),
                              daemon=True, name="scheduler")
    worker.start()
    host, port = config.host_port()
    try:
        uvicorn.run(app, host=host, port=port, log_level="info")
    finally:
        scheduler.stop()


@main.command()
@click.argument("definition", type=click.Path(exists=True, path_type=Path))
@click.pass_obj
def validate(ctx: Ctx, definition: Path) -> None:
    """Check a survey definition file; exit 0 only when it is clean."""
    try:
        parsed = flows.load_definition_file(definition)
    except flows.DefinitionFormatError as exc:
        ctx.emit({"valid": False, "violations": [{"kind": "formatError",
                                                  "detail": str(exc)}]},
                 f"INVALID: {exc}")
        sys.exit(EXIT_VALIDATION)
    except OSError as exc:
        click.echo(f"cannot read {definition}: {exc}", err=True)
        sys.exit(EXIT_IO)
    violations = flows.validate_definition(parsed)
    if violations:
        doc = {"valid": False, "violations": [
            {"kind": v.kind, "question": v.question, "detail": v.detail}
            for v in violations]}
        ctx.emit(doc, "\n".join(f"INVALID: {v}" for v in violations))
        sys.exit(EXIT_VALIDATION)
    ctx.emit({"valid": True, "violations": [],
              "surveyId": parsed.survey_id, "version": parsed.version,
              "questions": len(parsed.questions),
              "paths": flows.count_paths(parsed)},
             f"OK: {parsed.survey_id} v{parsed.version} "
             f"({len(parsed.questions)} questions, {flows.count_paths(parsed)} paths)")


@main.command("import-sensors")
@click.argument("file", type=click.Path(exists=True, path_type=Path))
@click.pass_obj
def import_sensors(ctx: Ctx, file: Path) -> None:
    """Load an environmental logger CSV (plain or .gz) into the sensor stream."""
    try:
        data = file.read_bytes()
    except OSError as exc:
        click.echo(f"cannot read {file}: {exc}", err=True)
        sys.exit(EXIT_IO)
    try:
        readings, rejects = sensors.parse_csv(data)
    except sensors.MalformedHeaderError as exc:
        ctx.emit({"error": "malformedHeader", "detail": str(exc)},
                 f"INVALID: {exc}")
        sys.exit(EXIT_VALIDATION)
    store = _open_store(ctx)
    try:
        imported = sensors.import_readings(store, readings)
    finally:
        store.close()
    doc = {"parsed": len(readings), "imported": imported,
           "rejected": len(rejects),
           "rejects": [{"line": r.line_no, "reason": r.reason, "detail": r.detail}
                       for r in rejects]}
    lines = [f"imported {imported} reading(s) ({len(readings)} parsed, "
             f"{len(rejects)} rejected)"]
    lines += [f"  line {r.line_no}: {r.reason} {r.detail}".rstrip() for r in rejects]
    ctx.emit(doc, "\n".join(lines))


def _open_store(ctx: Ctx) -> StreamStore:
    try:
        return StreamStore(ctx.config.data_dir)
    except OSError as exc:
        click.echo(f"cannot open data dir {ctx.config.data_dir}: {exc}", err=True)
        sys.exit(EXIT_IO)


def _load_definition(ctx: Ctx, survey_id: str) -> flows.SurveyDefinition:
    path = ctx.config.resolved_surveys_dir() / f"{survey_id}.json"
    try:
        definition = flows.load_definition_file(path)
    except OSError as exc:
        click.echo(f"cannot read survey definition {path}: {exc}", err=True)
        sys.exit(EXIT_IO)
    except flows.DefinitionFormatError as exc:
        click.echo(f"broken survey definition {path}: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    violations = flows.validate_definition(definition)
    if violations:
        click.echo(f"invalid survey definition {path}: {violations[0]}", err=True)
        sys.exit(EXIT_VALIDATION)
    return definition


def _merged_records(ctx: Ctx, survey_id: str, window_minutes: float,
                    location_key: str) -> tuple[list[fusion.MergedRecord],
                                                flows.SurveyDefinition]:
    definition = _load_definition(ctx, survey_id)
    store = _open_store(ctx)
    try:
        responses = [r.body for r in store.query_all("responses",
                                                     {"surveyId": survey_id})]
        readings = [r.body for r in store.query_all("sensor")]
    finally:
        store.close()
    merged = fusion.merge_responses(responses, readings,
                                    window_seconds=window_minutes * 60,
                                    location_key=location_key)
    return merged, definition


def _write_bytes(path: Path, data: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        click.echo(f"cannot write {path}: {exc}", err=True)
        sys.exit(EXIT_IO)


@main.command()
@click.option("--survey", default=defaults.SURVEY_ID, show_default=True)
@click.option("--window-minutes", default=15.0, show_default=True,
              help="Temporal match window around each submission.")
@click.option("--location-key", default=fusion.DEFAULT_LOCATION_KEY,
              show_default=True, help="Question identifier holding the location.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.pass_obj
def merge(ctx: Ctx, survey: str, window_minutes: float, location_key: str,
          out: Path) -> None:
    """Join responses with sensor readings; write merged records as JSONL."""
    merged, _ = _merged_records(ctx, survey, window_minutes, location_key)
    lines = "".join(json.dumps(fusion.merged_to_dict(m), ensure_ascii=False) + "\n"
                    for m in merged)
    _write_bytes(out, lines.encode("utf-8"))
    counts = {status: sum(1 for m in merged if m.match_status == status)
              for status in (fusion.MATCHED, fusion.NO_LOGGER,
                             fusion.NO_READING_IN_WINDOW)}
    ctx.emit({"path": str(out), "records": len(merged), "byStatus": counts},
             f"wrote {len(merged)} merged record(s) to {out} "
             f"({counts[fusion.MATCHED]} matched)")


@main.command()
@click.option("--survey", default=defaults.SURVEY_ID, show_default=True)
@click.option("--window-minutes", default=15.0, show_default=True)
@click.option("--location-key", default=fusion.DEFAULT_LOCATION_KEY,
              show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.pass_obj
def export(ctx: Ctx, survey: str, window_minutes: float, location_key: str,
           out: Path) -> None:
    """Write the analysis-ready merged CSV."""
    merged, definition = _merged_records(ctx, survey, window_minutes, location_key)
    _write_bytes(out, fusion.merged_csv_bytes(merged, definition))
    ctx.emit({"path": str(out), "records": len(merged)},
             f"wrote {len(merged)} row(s) to {out}")


@main.command()
@click.option("--survey", default=defaults.SURVEY_ID, show_default=True)
@click.option("--window-minutes", default=15.0, show_default=True)
@click.option("--location-key", default=fusion.DEFAULT_LOCATION_KEY,
              show_default=True)
@click.option("--bin-width", default=2.0, show_default=True,
              help="Temperature bin width in degrees Celsius.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.pass_obj
def profile(ctx: Ctx, survey: str, window_minutes: float, location_key: str,
            bin_width: float, out: Path) -> None:
    """Write per-participant thermal-preference profiles as JSON."""
    merged, _ = _merged_records(ctx, survey, window_minutes, location_key)
    profiles = fusion.preference_profiles(merged, bin_width_c=bin_width)
    doc = {"profiles": [profiles[pid].to_dict() for pid in sorted(profiles)]}
    _write_bytes(out, (json.dumps(doc, ensure_ascii=False, indent=2) + "\n")
                 .encode("utf-8"))
    ctx.emit({"path": str(out), "participants": len(profiles)},
             f"wrote {len(profiles)} profile(s) to {out}")


@main.command("simulate-day")
@click.option("--rules", "rules_path", type=click.Path(exists=True, path_type=Path),
              required=True, help="Notification rules file.")
@click.option("--rule", "rule_id", required=True)
@click.option("--date", "day_text", required=True, help="Local date YYYY-MM-DD.")
@click.option("--participant", "participants", multiple=True,
              default=("demo-participant",), show_default=True)
@click.pass_obj
def simulate_day(ctx: Ctx, rules_path: Path, rule_id: str, day_text: str,
                 participants: tuple[str, ...]) -> None:
    """Print the dispatch plan a scheduled rule produces for one day."""
    try:
        rules = notify.load_rules_file(rules_path)
    except (notify.InvalidRuleError, ValueError, KeyError) as exc:
        ctx.emit({"error": "invalidRules", "detail": str(exc)}, f"INVALID: {exc}")
        sys.exit(EXIT_VALIDATION)
    matching = [r for r in rules if r.rule_id == rule_id]
    if not matching:
        raise click.ClickException(f"no rule {rule_id!r} in {rules_path}")
    rule = matching[0]
    if rule.kind != notify.SCHEDULED:
        raise click.ClickException(f"rule {rule_id!r} is not a scheduled rule")
    try:
        day = date_type.fromisoformat(day_text)
    except ValueError:
        raise click.UsageError(f"--date must be YYYY-MM-DD, got {day_text!r}")
    plans = {}
    for pid in participants:
        try:
            plans[pid] = notify.plan_day(rule, day, pid)
        except notify.InvalidRuleError as exc:
            ctx.emit({"error": "invalidRule", "detail": str(exc)}, f"INVALID: {exc}")
            sys.exit(EXIT_VALIDATION)
    doc = {"ruleId": rule_id, "date": day_text,
           "plans": {pid: [format_utc_ms(t) for t in instants]
                     for pid, instants in plans.items()}}
    lines = []
    for pid, instants in plans.items():
        lines.append(f"{pid}: {len(instants)} dispatch(es)")
        lines += [f"  {format_utc_ms(t)}" for t in instants]
    ctx.emit(doc, "\n".join(lines))


if __name__ == "__main__":
    main()
