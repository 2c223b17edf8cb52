"""Invertible Fourier neural operator application.

This module builds the command-line group and registers the data generation,
training, evaluation, prediction, sampling and ablation commands.
"""
import logging

import click


def create_cli(test_config=None):
    """
    Create and configure the command-line group.

    :param test_config: Optional dictionary with logging settings for testing.
    :return: Configured click group.
    """
    settings = {"level": logging.INFO, "format": "%(asctime)s %(name)s %(levelname)s %(message)s"}
    if test_config is not None:
        settings.update(test_config)
    logging.basicConfig(**settings)

    @click.group(name="ifno")
    def cli():
        """Train and evaluate invertible Fourier neural operators."""

    from . import cli as commands

    cli.add_command(commands.gen_data_command)
    cli.add_command(commands.train_command)
    cli.add_command(commands.eval_command)
    cli.add_command(commands.predict_command)
    cli.add_command(commands.sample_command)
    cli.add_command(commands.ablate_command)

    return cli
