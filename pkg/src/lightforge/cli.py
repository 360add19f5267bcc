"""forge: command-line front end for the relighting pipeline.

Commands mirror the pipeline stages and compose through one output
directory; run them in order or use `forge pipeline run` to do everything.
Configuration comes from a JSON or TOML file (see configs/demo.json) with
flag overrides on top; only `forge serve` reads environment variables
(FORGE_PORT, FORGE_DATA_ROOT).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import click

from . import pipeline
from .olat import LightingSpec, spec_from_json


def _fail(exc: Exception) -> click.ClickException:
    return click.ClickException(str(exc))


_CONFIG_OPTIONS = (
    click.option("--config", "-c", type=click.Path(path_type=Path), default=None,
                 help="pipeline config file (JSON or TOML)"),
    click.option("--out", type=click.Path(path_type=Path), default=None,
                 help="output directory (overrides the config)"),
    click.option("--seed", "scene_seed", type=int, default=None, help="scene seed override"),
    click.option("--frames", type=int, default=None, help="training frame count override"),
    click.option("--cameras", "rig_cameras", type=int, default=None, help="rig camera count override"),
    click.option("--resolution", type=int, default=None, help="image resolution override"),
)


def config_options(fn):
    for opt in reversed(_CONFIG_OPTIONS):
        fn = opt(fn)
    return fn


def _make_config(config, out, **overrides) -> pipeline.PipelineConfig:
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if out is not None:
        overrides["out_dir"] = str(out)
    try:
        if config is not None:
            return pipeline.config_from_file(config, overrides)
        if "out_dir" not in overrides:
            raise pipeline.PipelineError("pass --config or at least --out")
        return pipeline.PipelineConfig(**overrides)
    except ValueError as exc:
        raise _fail(exc)


def _load_spec(cfg: pipeline.PipelineConfig, spec_path, identity: bool) -> LightingSpec:
    if identity and spec_path:
        raise click.ClickException("--identity and --spec are mutually exclusive")
    if identity:
        return LightingSpec(identity=True)
    path = spec_path or cfg.lighting
    if path is None:
        raise click.ClickException("no lighting spec: pass --spec/--identity or set `lighting` in the config")
    path = Path(path)
    if not path.exists():
        raise click.ClickException(f"lighting spec {path} does not exist")
    try:
        return spec_from_json(path.read_text())
    except ValueError as exc:
        raise _fail(exc)


@click.group()
@click.version_option(package_name="lightforge")
def main():
    """Relight procedural rooms through an OLAT basis and a voxel field."""


# --- scene ---------------------------------------------------------------------

@main.group()
def scene():
    """Procedural scene generation."""


@scene.command("gen")
@config_options
def scene_gen(config, out, **overrides):
    """Generate scene.json (deterministic in --seed)."""
    cfg = _make_config(config, out, **overrides)
    try:
        path = pipeline.stage_scene(cfg)
    except ValueError as exc:
        raise _fail(exc)
    click.echo(f"wrote {path}")


# --- olat ----------------------------------------------------------------------

@main.group()
def olat():
    """OLAT basis rendering."""


@olat.command("render")
@config_options
def olat_render(config, out, **overrides):
    """Render per-camera OLAT bases plus the rig and input lighting."""
    cfg = _make_config(config, out, **overrides)
    try:
        paths = pipeline.stage_olat(cfg)
    except ValueError as exc:
        raise _fail(exc)
    click.echo(f"rendered {len(paths)} OLAT bases under {cfg.out_dir / 'olat'}")


# --- relight -------------------------------------------------------------------

@main.group()
def relight():
    """Recombine the OLAT basis under a target lighting."""


@relight.command("composite")
@config_options
@click.option("--spec", "spec_path", type=click.Path(path_type=Path), default=None,
              help="LightingSpec JSON (default: the config's `lighting`)")
@click.option("--identity", is_flag=True, help="reproduce the scene's input lighting")
def relight_composite(config, out, spec_path, identity, **overrides):
    """Composite a frame set; prints its set id."""
    cfg = _make_config(config, out, **overrides)
    spec = _load_spec(cfg, spec_path, identity)
    try:
        set_id = pipeline.stage_composite(cfg, spec, set_id="input" if identity else None)
    except ValueError as exc:
        raise _fail(exc)
    click.echo(set_id)


# --- condition -----------------------------------------------------------------

@main.group()
def condition():
    """Per-pixel condition videos."""


@condition.command("build")
@config_options
@click.option("--spec", "spec_path", type=click.Path(path_type=Path), default=None)
@click.option("--identity", is_flag=True, help="all-sentinel (no-edit) video")
def condition_build(config, out, spec_path, identity, **overrides):
    """Encode the lighting request as a condition video."""
    cfg = _make_config(config, out, **overrides)
    spec = _load_spec(cfg, spec_path, identity)
    try:
        set_id = pipeline.stage_condition(cfg, spec, set_id="input" if identity else None)
    except ValueError as exc:
        raise _fail(exc)
    click.echo(f"wrote condition video for set {set_id}")


# --- distill / render / eval -----------------------------------------------------

def _resolve_set_id(cfg, set_id, spec_path, identity) -> str:
    if set_id:
        return set_id
    spec = _load_spec(cfg, spec_path, identity)
    try:
        _, resolved_id = pipeline.resolve_spec(cfg, spec)
    except ValueError as exc:
        raise _fail(exc)
    return resolved_id


@main.command()
@config_options
@click.option("--set", "set_id", default=None, help="frame set id (default: derived from the spec)")
@click.option("--spec", "spec_path", type=click.Path(path_type=Path), default=None)
@click.option("--identity", is_flag=True)
@click.option("--cold", is_flag=True, help="skip the input-lighting warm start")
def distill(config, out, set_id, spec_path, identity, cold, **overrides):
    """Fit the voxel field to a composited frame set."""
    cfg = _make_config(config, out, **overrides)
    if cold:
        cfg = pipeline.PipelineConfig(**{**pipeline.config_to_dict(cfg), "cold_start": True})
    set_id = _resolve_set_id(cfg, set_id, spec_path, identity)
    try:
        path = pipeline.stage_distill(
            cfg, set_id, progress=lambda phase, n: click.echo(f"{phase}: {n} iterations done")
        )
    except ValueError as exc:
        raise _fail(exc)
    click.echo(f"wrote {path}")


@main.group()
def render():
    """Novel-view rendering from the distilled field."""


@render.command("novel")
@config_options
@click.option("--set", "set_id", default=None)
@click.option("--spec", "spec_path", type=click.Path(path_type=Path), default=None)
@click.option("--identity", is_flag=True)
def render_novel(config, out, set_id, spec_path, identity, **overrides):
    """Render the held-out rig poses."""
    cfg = _make_config(config, out, **overrides)
    set_id = _resolve_set_id(cfg, set_id, spec_path, identity)
    try:
        paths = pipeline.stage_render_novel(cfg, set_id)
    except ValueError as exc:
        raise _fail(exc)
    click.echo(f"rendered {len(paths)} novel views under {paths[0].parent}")


@main.command("eval")
@config_options
@click.option("--set", "set_id", default=None)
@click.option("--spec", "spec_path", type=click.Path(path_type=Path), default=None)
@click.option("--identity", is_flag=True)
def eval_cmd(config, out, set_id, spec_path, identity, **overrides):
    """Score held-out renders against the oracle composites (prints JSON)."""
    cfg = _make_config(config, out, **overrides)
    set_id = _resolve_set_id(cfg, set_id, spec_path, identity)
    try:
        report = pipeline.stage_eval(cfg, set_id)
    except ValueError as exc:
        raise _fail(exc)
    click.echo(json.dumps(report, indent=2, sort_keys=True))


# --- ablate ----------------------------------------------------------------------

@main.group()
def ablate():
    """Training ablations."""


@ablate.command("sampler")
@click.option("--out", type=click.Path(path_type=Path), required=True,
              help="directory for ablation.csv / ablation.json")
@click.option("--seeds", type=int, default=5, show_default=True)
@click.option("--steps", type=int, default=2000, show_default=True)
@click.option("--seed", "scene_seed", type=int, default=2, show_default=True,
              help="scene used to build the toy dataset")
def ablate_sampler(out, seeds, steps, scene_seed):
    """Biased vs uniform timestep sampling on the toy relighter."""
    try:
        summary = pipeline.run_sampler_ablation(out, seeds=seeds, steps=steps, scene_seed=scene_seed)
    except ValueError as exc:
        raise _fail(exc)
    click.echo(json.dumps(summary["arm_mean_final_val_loss"], indent=2, sort_keys=True))
    click.echo(f"full report: {Path(out) / 'ablation.json'}")


# --- pipeline ----------------------------------------------------------------------

@main.group(name="pipeline")
def pipeline_grp():
    """Whole-pipeline orchestration."""


@pipeline_grp.command("run")
@config_options
@click.option("--spec", "spec_path", type=click.Path(path_type=Path), default=None)
def pipeline_run(config, out, spec_path, **overrides):
    """Scene, OLAT, composite, condition, distill, novel views, eval."""
    cfg = _make_config(config, out, **overrides)
    spec = _load_spec(cfg, spec_path, identity=False)
    try:
        report = pipeline.run_pipeline(cfg, spec, progress=lambda msg: click.echo(f"stage done: {msg}"))
    except ValueError as exc:
        raise _fail(exc)
    click.echo(json.dumps(report, indent=2, sort_keys=True))


# --- serve -----------------------------------------------------------------------

@main.command()
@click.option("--data-root", type=click.Path(path_type=Path),
              default=lambda: os.environ.get("FORGE_DATA_ROOT"),
              help="directory of prepared scene directories [env: FORGE_DATA_ROOT]")
@click.option("--port", type=int, default=lambda: int(os.environ.get("FORGE_PORT", "8000")),
              help="listen port [env: FORGE_PORT]")
@click.option("--host", default="127.0.0.1", show_default=True)
def serve(data_root, port, host):
    """Serve the relighting HTTP API."""
    if data_root is None:
        raise click.ClickException("pass --data-root or set FORGE_DATA_ROOT")
    import uvicorn

    from .service import create_app

    app = create_app(Path(data_root))
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
