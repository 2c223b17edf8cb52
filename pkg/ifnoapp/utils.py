"""
This file contains the error types, error reporting helpers and small
formatting utilities shared by the ifno application.
"""
import click

from ifnoapp.constants import (
    AUTODIFF_ERROR_TITLE,
    CONFIG_ERROR_TITLE,
    DIVERGENCE_ERROR_TITLE,
    EXIT_CONFIG,
    EXIT_DIVERGENCE,
    EXIT_SOLVER,
    FINGERPRINT_ERROR_TITLE,
    SHAPE_ERROR_TITLE,
    SOLVER_ERROR_TITLE,
    STORAGE_ERROR_TITLE)

FNV_OFFSET_BASIS = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3


class IFNOError(Exception):
    """
    Base error of the application. Every subclass carries the process exit
    code and a short title used when the error reaches the command line.
    """
    exit_code = 1
    title = "Error"


class ShapeError(IFNOError, ValueError):
    """
    Raised when tensor shapes or channel counts do not agree.
    """
    exit_code = EXIT_CONFIG
    title = SHAPE_ERROR_TITLE


class AutodiffError(IFNOError):
    """
    Raised on misuse of the computation tape.
    """
    title = AUTODIFF_ERROR_TITLE
    exit_code = EXIT_CONFIG


class ConfigError(IFNOError):
    """
    Raised for invalid, unknown or missing configuration keys.
    """
    exit_code = EXIT_CONFIG
    title = CONFIG_ERROR_TITLE


class StorageError(IFNOError):
    """
    Raised when a tensor file, checkpoint or dataset cannot be read or written.
    """
    exit_code = EXIT_CONFIG
    title = STORAGE_ERROR_TITLE


class FingerprintError(IFNOError):
    """
    Raised when a checkpoint does not match the requested configuration.
    """
    exit_code = EXIT_CONFIG
    title = FINGERPRINT_ERROR_TITLE


class SolverError(IFNOError):
    """
    Raised when the Darcy solver rejects its input or fails to converge.
    """
    exit_code = EXIT_SOLVER
    title = SOLVER_ERROR_TITLE

    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


class TrainingError(IFNOError):
    """
    Raised when training cannot continue.
    """
    exit_code = EXIT_DIVERGENCE
    title = DIVERGENCE_ERROR_TITLE


class DivergenceError(TrainingError):
    """
    Raised when a loss becomes non-finite or exceeds the divergence limit.
    """

    def __init__(self, stage, epoch, value):
        super().__init__(f"stage {stage} epoch {epoch}: loss {value}")
        self.stage = stage
        self.epoch = epoch
        self.value = value


class NonFiniteGradientError(TrainingError):
    """
    Raised by the optimizer when a gradient holds NaN or infinity.
    """

    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter '{name}'")
        self.name = name


def create_error_message(title, message=None):
    """
    Create a one-line error message with the given title and message.
    :param title: Title of the error.
    :param message: Detailed error message (optional).
    :return: The formatted message.
    """
    if message:
        return f"Error: {title}: {message}"
    return f"Error: {title}"


def fail(error):
    """
    Report an application error on stderr and exit with its code.
    :param error: The IFNOError to report.
    """
    click.echo(create_error_message(error.title, str(error)), err=True)
    raise click.exceptions.Exit(error.exit_code)


def fnv1a_64(text):
    """
    64-bit FNV-1a hash of a string.
    :param text: The string to hash.
    :return: The hash as an unsigned integer.
    """
    value = FNV_OFFSET_BASIS
    for byte in text.encode("utf-8"):
        value ^= byte
        value = (value * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return value


def fingerprint(meta):
    """
    Fingerprint of a meta mapping: FNV-1a over its sorted ``key=value`` lines.
    :param meta: Mapping of meta keys to values.
    :return: Sixteen hex digits.
    """
    lines = "\n".join(f"{key}={meta[key]}" for key in sorted(meta))
    return f"{fnv1a_64(lines):016x}"


def parse_key_values(line):
    """
    Parse a whitespace separated list of ``key=value`` tokens.
    :param line: A single text line.
    :return: Dictionary of the tokens.
    """
    pairs = {}
    for token in line.split():
        if "=" not in token:
            raise StorageError(f"malformed token '{token}'")
        key, value = token.split("=", 1)
        pairs[key] = value
    return pairs


def format_key_values(pairs):
    """
    Format a mapping as whitespace separated ``key=value`` tokens.
    """
    return " ".join(f"{key}={value}" for key, value in pairs.items())


def format_mean_std(mean, std):
    """
    Format a mean and standard deviation in ``Xe-Y ± Ze-W`` notation.
    """
    return f"{mean:.2e} ± {std:.2e}"
