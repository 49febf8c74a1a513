"""Experiment config files.

INI-style text with ``[data] [env] [rl] [eval]`` sections and ``#``
comments; ``section.key = value`` lines are also accepted before the first
section header. The canonical text (sections in fixed order, keys sorted,
floats in repr form) is what gets hashed.
"""
import configparser
import hashlib
import re
from typing import Union

from common.args import ExperimentConfig, format_value
from common.errors import ConfigError
from common.writer import atomic_write

ROOT = "__root__"


def _line_of(text: str, key: str):
    pattern = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return number
    return None


def config_parse(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(
        interpolation=None,
        delimiters=("=",),
        comment_prefixes=("#",),
        inline_comment_prefixes=("#",),
        default_section="__defaults__",
    )
    parser.optionxform = str
    try:
        parser.read_string(f"[{ROOT}]\n{text}")
    except configparser.ParsingError as exc:
        line, content = exc.errors[0] if exc.errors else (None, "")
        raise ConfigError(f"cannot parse {content!s}", line=line - 1 if line else None) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(str(exc).split(":")[-1].strip(), line=exc.lineno - 1 if exc.lineno else None) from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    config = ExperimentConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            dotted = key if section == ROOT else f"{section}.{key}"
            try:
                config.update_from_dict({dotted: value})
            except ConfigError as exc:
                raise ConfigError(str(exc), key=exc.key, line=_line_of(text, key)) from None
    try:
        return config.validate()
    except ConfigError as exc:
        short = exc.key.partition(".")[2]
        line = _line_of(text, exc.key) or _line_of(text, short)
        raise ConfigError(str(exc), key=exc.key, line=line) from None


def canonicalize(config: Union[str, ExperimentConfig]) -> str:
    if isinstance(config, str):
        config = config_parse(config)
    blocks = []
    for name, section in config.sections():
        lines = [f"[{name}]"] + [f"{key} = {format_value(value)}" for key, value in section.items()]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def config_hash(config: Union[str, ExperimentConfig]) -> str:
    return hashlib.sha256(canonicalize(config).encode("utf-8")).hexdigest()


def config_load(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_parse(f.read())


def config_save(config: ExperimentConfig, path):
    atomic_write(path, canonicalize(config).encode("utf-8"))
