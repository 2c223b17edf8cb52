"""
Command-line subcommands. Every command writes its artifacts under one
output directory together with the resolved configuration.
"""
import functools
import logging
import os

import click

from ifnoapp.config import (
    MODEL_KEYS,
    PROFILES,
    ModelConfig,
    TrainConfig,
    create_config,
    format_config,
    load_config,
    parse_int_list)
from ifnoapp.constants import (
    ABLATION_FILE,
    BASELINE_FILE,
    CONFIG_ECHO_FILE,
    LOSS_HISTORY_FILE,
    METRICS_FILE,
    PERMEABILITY_FLOOR,
    STAGE_CHECKPOINTS,
    SUMMARY_FILE,
    TENSOR_SUFFIX)
from ifnoapp.datagen import Normalizer, derive_seed, generate_dataset, inject_noise, snr_db
from ifnoapp.evaluation import (
    eval_baseline,
    evaluate,
    pointwise_error,
    posterior_uncertainty,
    predict_forward,
    predict_inverse)
from ifnoapp.storage import (
    ensure_dir,
    load_checkpoint,
    load_dataset,
    read_dataset_normalizer,
    read_loss_history,
    read_tensor,
    save_checkpoint,
    save_dataset,
    stage_checkpoint_path,
    write_loss_history,
    write_map,
    write_metrics,
    write_summary,
    write_tensor,
    write_text)
from ifnoapp.training import LossReport, init_models, train_three_step
from ifnoapp.utils import ConfigError, FingerprintError, IFNOError, fail, format_mean_std

logger = logging.getLogger(__name__)

NOISE_STREAM = 2 ** 32 - 1
RESUME_STAGES = {"stage2": (2, STAGE_CHECKPOINTS[0]), "stage3": (3, STAGE_CHECKPOINTS[1])}


def reports_errors(command):
    """
    Turn application errors into an error line and the matching exit code.
    """
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except IFNOError as error:
            logger.debug("command failed", exc_info=True)
            fail(error)
    return wrapper


def _resolve_config(path, command, seed=None, profile=None):
    overrides = {key: value for key, value in (("seed", seed), ("profile", profile))
                 if value is not None}
    return create_config(path=path, test_config=overrides or None, command=command)


def _echo_config(out_dir, config):
    ensure_dir(out_dir)
    write_text(os.path.join(out_dir, CONFIG_ECHO_FILE), format_config(config))


def _training_arrays(dataset, normalizer, dtype):
    f = normalizer.normalize_a(dataset.a)[..., None].astype(dtype)
    u = normalizer.normalize_u(dataset.u)[..., None].astype(dtype)
    return f, u


def _check_grid(dataset, grid, source):
    if dataset.grid != grid:
        raise ConfigError(f"dataset '{source}' has grid {dataset.grid}, configuration expects {grid}")


def _check_compatible(config_path, checkpoint):
    """
    Compare the model keys of a configuration file with the checkpoint meta.
    """
    if config_path is None:
        return
    values = load_config(config_path)
    overrides = {key: values[key] for key in MODEL_KEYS if key in values}
    if not overrides:
        return
    meta = checkpoint.config.serialize()
    meta.update({key: str(value) for key, value in overrides.items()})
    expected = ModelConfig.from_mapping(meta)
    if expected.fingerprint() != checkpoint.config.fingerprint():
        raise FingerprintError(
            f"configuration fingerprint {expected.fingerprint()} does not match "
            f"checkpoint fingerprint {checkpoint.config.fingerprint()}")


def _open_checkpoint(path, config_path=None):
    checkpoint = load_checkpoint(path)
    _check_compatible(config_path, checkpoint)
    return checkpoint


def _train_run(config, model_config, train, normalizer, out_dir=None,
               start_stage=1, model=None, vae=None, history=None):
    train_config = TrainConfig.from_mapping(config)
    f, u = _training_arrays(train, normalizer, model_config.real_dtype)
    if model is None:
        model, vae = init_models(model_config, train_config.seed)

    def hook(stage, model, vae, history):
        if out_dir is None:
            return
        save_checkpoint(stage_checkpoint_path(out_dir, STAGE_CHECKPOINTS[stage - 1]),
                        model, vae, normalizer)
        write_loss_history(os.path.join(out_dir, LOSS_HISTORY_FILE), history)
        click.echo(f"Finished stage {stage}: loss {history[-1].total:.6e}")

    return train_three_step(f, u, model, vae, train_config, start_stage=start_stage,
                            history=history, checkpoint_hook=hook)


@click.command("gen-data")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="key=value configuration file.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True,
              help="Dataset directory to create.")
@click.option("--seed", type=int, default=None, help="Overrides the configured seed.")
@reports_errors
def gen_data_command(config_path, out_dir, seed):
    """
    Generate a Darcy dataset with noise on the training split.
    """
    config = _resolve_config(config_path, "gen-data", seed)
    master = config["seed"]
    options = {"tol": config["solver_tol"], "preconditioner": config["preconditioner"],
               "workers": config["workers"]}
    train = generate_dataset(config["task"], config["grid"], config["n_train"], master, **options)
    test = generate_dataset(config["task"], config["grid"], config["n_test"], master,
                            start=config["n_train"], **options)
    noise_seed = derive_seed(master, NOISE_STREAM)
    noisy, noise = inject_noise(train, config["eta"], noise_seed)
    snr_input, snr_output = snr_db(train, noisy)
    info = {"kind": config["task"], "grid": config["grid"], "n_train": config["n_train"],
            "n_test": config["n_test"], "seed": master, "eta": config["eta"],
            "noise_seed": noise_seed, "solver_tol": config["solver_tol"],
            "preconditioner": config["preconditioner"],
            "permeability_floor": PERMEABILITY_FLOOR,
            "snr_input": snr_input, "snr_output": snr_output}
    save_dataset(out_dir, noisy, test, info, noise, Normalizer.fit(noisy))
    _echo_config(out_dir, config)
    click.echo(f"Generated {len(train) + len(test)} samples in {out_dir} "
               f"(SNR input {snr_input:.2f} dB, output {snr_output:.2f} dB)")


@click.command("train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--resume-from", "resume_from", type=click.Choice(sorted(RESUME_STAGES)),
              default=None, help="Restart from a stage checkpoint in --out.")
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default=None,
              help="Model and schedule preset overlaid beneath --config.")
@reports_errors
def train_command(config_path, data_dir, out_dir, seed, resume_from, profile):
    """
    Run the three-step training schedule.
    """
    config = _resolve_config(config_path, "train", seed, profile)
    model_config = ModelConfig.from_mapping(config)
    train, _, _ = load_dataset(data_dir)
    _check_grid(train, model_config.grid, data_dir)
    normalizer = read_dataset_normalizer(data_dir)
    _echo_config(out_dir, config)

    start_stage, model, vae, history = 1, None, None, None
    if resume_from is not None:
        start_stage, name = RESUME_STAGES[resume_from]
        checkpoint = load_checkpoint(stage_checkpoint_path(out_dir, name), expected=model_config)
        model, vae = checkpoint.model, checkpoint.vae
        history = [report for report in read_loss_history(
            os.path.join(out_dir, LOSS_HISTORY_FILE), LossReport) if report.stage < start_stage]
        click.echo(f"Resuming at stage {start_stage} from {name}")

    _train_run(config, model_config, train, normalizer, out_dir=out_dir,
               start_stage=start_stage, model=model, vae=vae, history=history)
    click.echo(f"Training complete; checkpoints in {out_dir}")


@click.command("eval")
@click.option("--checkpoint", "checkpoint_dir", type=click.Path(file_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--split", type=click.Choice(["test", "train"]), default="test")
@reports_errors
def eval_command(checkpoint_dir, data_dir, out_dir, config_path, seed, split):
    """
    Write metrics, the constant-mean baseline and pointwise error maps.
    """
    config = _resolve_config(config_path, "eval", seed)
    checkpoint = _open_checkpoint(checkpoint_dir, config_path)
    train, test, _ = load_dataset(data_dir)
    dataset = test if split == "test" else train
    _check_grid(dataset, checkpoint.config.grid, data_dir)
    _echo_config(out_dir, config)

    model, vae, normalizer = checkpoint.model, checkpoint.vae, checkpoint.normalizer
    report = evaluate(model, vae, normalizer, dataset, seed=config["seed"],
                      fingerprint=checkpoint.config.fingerprint())
    write_metrics(os.path.join(out_dir, METRICS_FILE), report)
    write_summary(os.path.join(out_dir, SUMMARY_FILE), report, label=f"split {split}")
    write_summary(os.path.join(out_dir, BASELINE_FILE), eval_baseline(train, dataset),
                  label="constant-mean baseline")

    count = min(config["n_maps"], len(dataset))
    if count:
        maps = dataset.subset(range(count))
        forward = predict_forward(model, normalizer, maps.a)
        inverse = predict_inverse(model, vae, normalizer, maps.u)
        for index in range(count):
            write_map(out_dir, f"error_fwd_{index:05d}", pointwise_error(forward[index], maps.u[index]))
            write_map(out_dir, f"error_inv_{index:05d}", pointwise_error(inverse[index], maps.a[index]))

    click.echo(f"forward {format_mean_std(report.forward_mean, report.forward_std)}")
    click.echo(f"inverse {format_mean_std(report.inverse_mean, report.inverse_std)}")


def _read_fields(path, grid):
    fields = read_tensor(path)
    if fields.shape[-2:] != (grid, grid) or fields.ndim not in (2, 3):
        raise ConfigError(f"input '{path}' has shape {fields.shape}, expected [N,] {grid} x {grid}")
    return fields


@click.command("predict")
@click.option("--checkpoint", "checkpoint_dir", type=click.Path(file_okay=False), required=True)
@click.option("--input", "input_path", type=click.Path(dir_okay=False), required=True,
              help="Tensor file with one [n, n] field or a stack [N, n, n].")
@click.option("--direction", type=click.Choice(["fwd", "inv"]), default="fwd")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@reports_errors
def predict_command(checkpoint_dir, input_path, direction, out_dir, config_path):
    """
    Forward (a -> u) or inverse (u -> a) prediction of a tensor file.
    """
    config = _resolve_config(config_path, "predict")
    checkpoint = _open_checkpoint(checkpoint_dir, config_path)
    fields = _read_fields(input_path, checkpoint.config.grid)
    single = fields.ndim == 2
    batch = fields[None] if single else fields
    if direction == "fwd":
        pred = predict_forward(checkpoint.model, checkpoint.normalizer, batch)
    else:
        pred = predict_inverse(checkpoint.model, checkpoint.vae, checkpoint.normalizer, batch)
    _echo_config(out_dir, config)
    target = os.path.join(out_dir, "prediction" + TENSOR_SUFFIX)
    write_tensor(target, pred[0] if single else pred)
    click.echo(f"Wrote {direction} prediction to {target}")


@click.command("sample")
@click.option("--checkpoint", "checkpoint_dir", type=click.Path(file_okay=False), required=True)
@click.option("--input", "input_path", type=click.Path(dir_okay=False), required=True,
              help="Tensor file with one [n, n] output field.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--samples", type=int, default=None, help="Overrides uncertainty_samples.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@reports_errors
def sample_command(checkpoint_dir, input_path, out_dir, samples, config_path, seed):
    """
    Posterior mean and std maps of the inverse prediction.
    """
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if samples is not None:
        overrides["uncertainty_samples"] = samples
    config = create_config(path=config_path, test_config=overrides, command="sample")
    checkpoint = _open_checkpoint(checkpoint_dir, config_path)
    fields = _read_fields(input_path, checkpoint.config.grid)
    if fields.ndim != 2:
        raise ConfigError(f"sample expects one [n, n] field, got shape {fields.shape}")
    result = posterior_uncertainty(checkpoint.model, checkpoint.vae, checkpoint.normalizer,
                                   fields, config["uncertainty_samples"], config["seed"])
    _echo_config(out_dir, config)
    write_map(out_dir, "mean", result.mean)
    write_map(out_dir, "std", result.std)
    click.echo(f"Wrote mean and std of {result.samples} samples to {out_dir}")


@click.command("ablate")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default=None,
              help="Model and schedule preset overlaid beneath --config.")
@reports_errors
def ablate_command(config_path, data_dir, out_dir, seed, profile):
    """
    Train one model per ``ablation_blocks`` entry and compare test errors.
    """
    config = _resolve_config(config_path, "ablate", seed, profile)
    train, test, _ = load_dataset(data_dir)
    normalizer = read_dataset_normalizer(data_dir)
    _echo_config(out_dir, config)

    rows = ["blocks,rel_l2_fwd,rel_l2_inv\n"]
    for blocks in parse_int_list(config["ablation_blocks"]):
        model_config = ModelConfig.from_mapping({**config, "blocks": blocks})
        _check_grid(train, model_config.grid, data_dir)
        result = _train_run(config, model_config, train, normalizer)
        report = evaluate(result.model, result.vae, normalizer, test)
        rows.append(f"{blocks},{report.forward_mean!r},{report.inverse_mean!r}\n")
        click.echo(f"K={blocks}: forward {report.forward_mean:.4e}, inverse {report.inverse_mean:.4e}")
    write_text(os.path.join(out_dir, ABLATION_FILE), "".join(rows))
