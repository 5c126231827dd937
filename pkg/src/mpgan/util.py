###############################################################################
# Copyright 2025 The mpgan Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#
###############################################################################
import logging
import os
import pathlib
import sys
import tempfile
from typing import Any

import aiofiles
import aioshutil
import jinja2

from .exc import CliWarning, VolumeIOError

ROOT_LOGGER = 'mpgan'
LOG_FORMAT = '%(name)-10s %(levelname)-7s %(message)s'


class StagingDirectory:
    """Hidden scratch directory next to its final destination.  Everything is written into
    `path`; `publish` moves the finished tree into place, and leaving the `async with` block
    removes whatever was not published.
    """

    def __init__(self, parent: pathlib.Path, prefix: str = '.stage_'):
        parent = pathlib.Path(parent).expanduser().resolve()
        parent.mkdir(parents=True, exist_ok=True)
        self.path = pathlib.Path(tempfile.mkdtemp(prefix=prefix, dir=parent))
        self.published: pathlib.Path | None = None

    async def __aenter__(self) -> 'StagingDirectory':
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb) -> None:
        if self.path.exists():
            await aioshutil.rmtree(self.path)

    async def publish(self, dest: pathlib.Path) -> pathlib.Path:
        """ Move the staged tree to `dest`, replacing a previous run there """
        if dest.exists():
            await aioshutil.rmtree(dest)
        dest.parent.mkdir(parents=True, exist_ok=True)
        await aioshutil.move(self.path, dest)
        self.published = dest
        return dest


class LoggingMixin:
    """Gives a worker class its own named logger.  Call `_setup_logger` once, after the CLI
    has configured the `mpgan` logger; the worker logger copies that level.  `log` prefixes
    every message with the worker's label, e.g. the simulation name.
    """
    _logger: logging.Logger
    _prefix: str | None

    def _setup_logger(self, name: str, msg_prefix: str | None = None) -> None:
        self._prefix = msg_prefix
        self._logger = setup_logger(name, level=logging.getLogger(ROOT_LOGGER).level)

    def log(self, msg: str, lvl: str = 'error', **kwargs) -> None:
        """ Log `msg` at level `lvl` ('debug', 'info', 'warning', 'error', 'exception') """
        if self._prefix:
            msg = f'{self._prefix}: {msg}'
        getattr(self._logger, lvl)(msg, **kwargs)


def verbosity_level(verbose: int, quiet: bool) -> int:
    """ `-q` ERROR, default WARNING, `-v` INFO, `-vv` and above DEBUG """
    if quiet:
        return logging.ERROR
    return {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)


def setup_logger(name: str | None = None,
                 level: str | int = logging.WARNING,
                 log_format: str = LOG_FORMAT) -> logging.Logger:
    """Configure `name` once: DEBUG and INFO records go to stdout, WARNING and above to
    stderr.  A logger that already has handlers is returned unchanged.

    Args:
        name: logger name; `None` is the root logger
        level: level number or name, e.g. 'INFO'
        log_format: `logging.Formatter` format string
    """
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger
    logger.setLevel(level if isinstance(level, int) else level.upper())

    formatter = logging.Formatter(log_format)
    out = logging.StreamHandler(sys.stdout)
    out.setLevel(logging.DEBUG)
    out.addFilter(lambda record: record.levelno < logging.WARNING)
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.WARNING)
    for handler in (out, err):
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    logger.propagate = False
    return logger


def atomic_write_bytes(path: pathlib.Path, payload: bytes) -> pathlib.Path:
    """Writes `payload` to a sibling temp file and renames it over `path`, so readers
    never observe a partially written file

    Raises:
        VolumeIOError: on any OS error, naming `path`
    """
    path = pathlib.Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f'.{path.name}.', dir=path.parent)
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        raise VolumeIOError(f'Could not write {path}: {e}') from e
    return path


async def async_write_bytes(path: pathlib.Path, payload: bytes) -> pathlib.Path:
    """ aiofiles counterpart of `atomic_write_bytes` for files inside a staging directory,
    where atomicity is provided by publishing the directory as a whole
    """
    try:
        async with aiofiles.open(path, 'wb') as f:
            await f.write(payload)
    except OSError as e:
        raise VolumeIOError(f'Could not write {path}: {e}') from e
    return path


def render_template(template_str: str, context: dict[str, Any], owner: LoggingMixin) -> str:
    """Render a Jinja template string

    Args:
        template_str: Jinja template as a string.
        context: template variables
        owner: object whose logger receives rendering errors

    Raises:
        CliWarning: If there are issues with template rendering.
    """
    try:
        template = jinja2.Template(
            template_str,
            trim_blocks=True,
            lstrip_blocks=True,
            undefined=jinja2.StrictUndefined,
        )
        return template.render(**context)
    except jinja2.exceptions.TemplateError as e:
        owner.log(f'Error rendering template, contents: {template_str[:32]}...; '
                  f'error: {e}', 'exception')
        raise CliWarning('Error rendering template') from e
