"""Experiment manifests.

A manifest is an INI file echoing every knob an experiment ran with, written
deterministically so a rerun from the same manifest produces byte-identical
outputs (wall-clock timing columns aside).  Keys keep their case and values
are stored verbatim — no interpolation.
"""
from __future__ import annotations

import configparser

from .errors import ParseError


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    return parser


def write_manifest(path: str, sections: dict[str, dict[str, object]]) -> None:
    parser = _parser()
    for name, entries in sections.items():
        parser[name] = {key: str(value) for key, value in entries.items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def read_manifest(path: str) -> dict[str, dict[str, str]]:
    parser = _parser()
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ParseError("manifest not found or unreadable", path)
    return {name: dict(parser[name]) for name in parser.sections()}
