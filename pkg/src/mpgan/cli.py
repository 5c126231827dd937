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
import argparse
import asyncio
import collections
import logging
import pathlib
import sys
from importlib.metadata import version
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from .bench import Benchmark, write_records
from .checkpoint import load_generator
from .config import Settings
from .dataset import ShardBuilder, shard_name, write_shard
from .exc import CliError
from .inference import combine_axes, multipass_upscale, single_axis_upscale, upsample_trilinear
from .metrics import format_psnr, plot_losses, psnr, render_slice
from .networks import Generator, build_network, generator_spec
from .solver import SimulationRunner
from .training import train_first_pass, train_second_pass
from .types import Axis, CombineMode, CommandType, LossKind, RunStatus
from .util import atomic_write_bytes
from .volio import read_fvol, sidecar_path, write_fvol


def _add_factor(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument(
        '--factor',
        type=int,
        choices=(4, 8),
        required=required,
        help='up-scaling factor; default: from the config file, else 4')


def _add_scale(p: argparse.ArgumentParser) -> None:
    scale_mutex = p.add_mutually_exclusive_group()
    scale_mutex.add_argument(
        '--desk-scale',
        dest='scale',
        action='store_const',
        const='desk',
        help='small data and iteration counts divided by 100')
    scale_mutex.add_argument(
        '--full-scale',
        dest='scale',
        action='store_const',
        const='full',
        help='published data sizes and iteration counts')


# pylint: disable-next=too-many-statements
def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parse command line arguments.  Normalizes provided `pathlib.Path`s and checks that
    inputs exist

    Raises:
        CliError: if any of the argument validation fails

    Returns:
        `argparse.Namespace` containing parsed args
    """
    root_parser = argparse.ArgumentParser(prog='mpgan')

    verbosity_mutex = root_parser.add_mutually_exclusive_group()
    verbosity_mutex.add_argument(
        '-v', '--verbose',
        action='count',
        default=0,
        help='increase output verbosity; -vv for max verbosity')
    verbosity_mutex.add_argument(
        '-q', '--quiet',
        action='store_true',
        help='output errors only')

    root_parser.add_argument(
        '--workers',
        type=int,
        default=0,
        help='async workers for gen-data and slice; defaults to sequential processing')
    root_parser.add_argument(
        '--config',
        metavar='CONFIG_YAML',
        type=pathlib.Path,
        help='YAML run configuration')
    root_parser.add_argument(
        '--seed',
        type=int,
        help='base random seed; default: from the config file, else 0')
    root_parser.add_argument('--version', action='version', version=version('mpgan'))

    subparser = root_parser.add_subparsers(required=True)

    gen = subparser.add_parser('gen-data', help='simulate smoke and export training volumes')
    gen.set_defaults(type=CommandType.GEN_DATA)
    gen.add_argument('--out', type=pathlib.Path, required=True, help='output directory')
    gen.add_argument('--simulations', type=int, help='number of simulations')
    gen.add_argument('--frames', type=int, help='frames per simulation')
    _add_factor(gen)
    _add_scale(gen)

    slc = subparser.add_parser('slice', help='build training shards from simulations')
    slc.set_defaults(type=CommandType.SLICE)
    slc.add_argument('--in', dest='in_dir', type=pathlib.Path, required=True,
                     help='directory of simulations written by gen-data')
    slc.add_argument('--out', type=pathlib.Path, required=True, help='shard directory')
    slc.add_argument('--pass', dest='pass_index', type=int, choices=(1, 2), default=1,
                     help='which network the shards train; default: 1')
    slc.add_argument('--ckpt1', type=pathlib.Path,
                     help='first-pass checkpoint; required for --pass 2')
    _add_factor(slc)

    train = subparser.add_parser('train', help='train a generator and its critics')
    train.set_defaults(type=CommandType.TRAIN)
    train.add_argument('--pass', dest='pass_index', type=int, choices=(1, 2), required=True)
    train.add_argument('--loss', type=LossKind, choices=list(LossKind),
                       help='adversarial objective; default: wgan_gp')
    train.add_argument('--shards', type=pathlib.Path, required=True, help='shard directory')
    train.add_argument('--out', type=pathlib.Path, required=True, help='checkpoint directory')
    train.add_argument('--ckpt1', type=pathlib.Path,
                       help='first-pass checkpoint; required for --pass 2')
    train.add_argument('--resume', type=pathlib.Path, help='checkpoint to continue from')
    train.add_argument('--iterations', type=int,
                       help='stop after this many iterations; default: the full schedule')
    _add_factor(train)
    _add_scale(train)

    infer = subparser.add_parser('infer', help='multi-pass up-scaling of one frame')
    infer.set_defaults(type=CommandType.INFER)
    infer.add_argument('--ckpt2', type=pathlib.Path, required=True)
    infer.add_argument('--dt-sim', type=float, help='time step of the input simulation')

    axis = subparser.add_parser('infer-axis', help='single-axis up-scaling for the baselines')
    axis.set_defaults(type=CommandType.INFER_AXIS)
    axis.add_argument('--axis', type=Axis.parse, choices=list(Axis), required=True)
    axis.add_argument('--dt-sim', type=float, help='time step of the input simulation')

    for p in (infer, axis):
        p.add_argument('--in', dest='in_file', type=pathlib.Path, required=True,
                       help='LR density FVOL')
        p.add_argument('--vel', type=pathlib.Path, required=True, help='LR velocity FVOL')
        p.add_argument('--ckpt1', type=pathlib.Path, required=True)
        p.add_argument('--out', type=pathlib.Path, required=True, help='output FVOL')
        _add_factor(p)

    comb = subparser.add_parser('combine', help='merge single-axis volumes')
    comb.set_defaults(type=CommandType.COMBINE)
    comb.add_argument('--mode', type=CombineMode, choices=list(CombineMode), required=True)
    comb.add_argument('--inputs', type=pathlib.Path, nargs=3, required=True,
                      metavar=('X_FVOL', 'Y_FVOL', 'Z_FVOL'))
    comb.add_argument('--upsampled', type=pathlib.Path,
                      help='up-sampled input volume; required for res and cres')
    comb.add_argument('--lr', type=pathlib.Path,
                      help='LR density to up-sample trilinearly instead of --upsampled')
    comb.add_argument('--base-axis', type=Axis.parse, default=Axis.Z)
    comb.add_argument('--out', type=pathlib.Path, required=True)

    bench = subparser.add_parser('bench', help='time multi-pass inference and the solver')
    bench.set_defaults(type=CommandType.BENCH)
    bench.add_argument('--sizes', type=int, nargs='+', help='LR edges of the inference fit')
    bench.add_argument('--solver-sizes', type=int, nargs='+',
                       help='LR edges of the performance table rows')
    bench.add_argument('--frames', type=int, help='timed frames per size')
    bench.add_argument('--substeps', type=int, help='solver steps per output frame')
    bench.add_argument('--ckpt1', type=pathlib.Path, help='default: random weights')
    bench.add_argument('--ckpt2', type=pathlib.Path, help='default: random weights')
    bench.add_argument('--out', type=pathlib.Path, required=True, help='CSV of timings')
    bench.add_argument('--table', type=pathlib.Path, help='Markdown performance table')
    _add_factor(bench)

    render = subparser.add_parser('render', help='write one slice as a PNG')
    render.set_defaults(type=CommandType.RENDER)
    render.add_argument('--in', dest='in_file', type=pathlib.Path, required=True)
    render.add_argument('--axis', type=Axis.parse, choices=list(Axis), required=True)
    render.add_argument('--index', type=int, required=True)
    render.add_argument('--out', type=pathlib.Path, required=True)

    score = subparser.add_parser('psnr', help='PSNR between two volumes')
    score.set_defaults(type=CommandType.PSNR)
    score.add_argument('a', type=pathlib.Path)
    score.add_argument('b', type=pathlib.Path)
    score.add_argument('--peak', type=float, help='default: the larger maximum of a and b')

    plot = subparser.add_parser('plot-losses', help='compare training logs')
    plot.set_defaults(type=CommandType.PLOT_LOSSES)
    plot.add_argument('logs', type=pathlib.Path, nargs='+', help='CSV training logs')
    plot.add_argument('--term', default='g_l1', help='log column to plot; default: g_l1')
    plot.add_argument('--out', type=pathlib.Path, required=True)

    args = root_parser.parse_args(argv)

    args = validate_and_normalize_args(args)

    return args


_INPUT_FILES = ('config', 'in_file', 'vel', 'ckpt1', 'ckpt2', 'resume', 'upsampled', 'lr', 'a',
                'b')
_INPUT_DIRS = ('in_dir', 'shards')


def validate_and_normalize_args(args: argparse.Namespace) -> argparse.Namespace:
    """ Validate and normalize command line arguments.
    Args:
        args: argparse.Namespace parsed command line arguments

    Returns:
        `argparse.Namespace` containing args

    Raises:
        CliError: if any of the argument validation fails
    """
    for name, value in vars(args).items():
        if isinstance(value, pathlib.Path):
            setattr(args, name, value.resolve())
    if getattr(args, 'inputs', None):
        args.inputs = [p.resolve() for p in args.inputs]
    if getattr(args, 'logs', None):
        args.logs = [p.resolve() for p in args.logs]

    try:
        for name in _INPUT_FILES:
            item = getattr(args, name, None)
            if item is not None:
                assert item.is_file(), f'Provided path ({item}) is not a file'
        for item in [*getattr(args, 'inputs', None) or [], *getattr(args, 'logs', None) or []]:
            assert item.is_file(), f'Provided path ({item}) is not a file'
        for name in _INPUT_DIRS:
            item = getattr(args, name, None)
            if item is not None:
                assert item.is_dir(), f'Provided path ({item}) is not a directory'
        if getattr(args, 'pass_index', 1) == 2:
            assert args.ckpt1 is not None, '--pass 2 requires --ckpt1'
        if args.type is CommandType.COMBINE and args.mode in (CombineMode.RES, CombineMode.CRES):
            assert args.upsampled or args.lr, f'--mode {args.mode.value} requires --upsampled ' \
                                              f'or --lr'
        assert args.workers >= 0, '--workers must be >= 0'
        assert args.seed is None or args.seed >= 0, '--seed must be >= 0'
    except AssertionError as e:
        print(e, file=sys.stderr)
        raise CliError(e) from e

    return args


class WorkItem(Protocol):
    """ Unit of work for the worker pool """
    name: str
    status: RunStatus

    async def run(self) -> Any:  # pylint: disable=missing-function-docstring
        ...


class BaseCli:
    """Shared flow of every subcommand: `_execute` does the work, optionally feeding
    `WorkItem`s through `_run_all`, then `report` summarizes the items and sets the exit code.
    Subclasses only implement `_execute`.
    """
    items: list[WorkItem]

    def __init__(self, *,
                 logger: logging.Logger,
                 settings: Settings,
                 args: argparse.Namespace,
                 workers: int = 0):
        if type(self) is BaseCli:  # pylint: disable=unidiomatic-typecheck
            raise TypeError('BaseCli is abstract; use a subcommand class')
        self._logger = logger
        self._settings = settings
        self._args = args
        self._workers = workers
        self.items = []

    @property
    def noun(self) -> str:
        """ What one work item is called in the summary """
        return 'item'

    def report(self) -> dict[str, list[str]]:
        """Print a summary of the work items: one line on stdout when all succeeded, otherwise
        the failed items and their failed stages on stderr

        Returns:
            `{item name: [failed stages]}`, empty when nothing failed
        """
        if not self.items:
            return {}
        failures = self._gather_failures()
        total = len(self.items)
        if not failures:
            print(f'{total} {self.noun}s total, all completed successfully')
            return failures
        print(f'\n{total} {self.noun}s: {total - len(failures)} succeeded, '
              f'{len(failures)} failed\n', file=sys.stderr)
        for name, stages in failures.items():
            print(f'{self.noun.title()} {name} failed: {", ".join(stages)}', file=sys.stderr)
        return failures

    def _gather_failures(self) -> dict[str, list[str]]:
        failures: dict[str, list[str]] = collections.defaultdict(list)
        stages = (('compute_ok', 'compute'), ('solver_ok', 'solver convergence'),
                  ('write_ok', 'write'))
        for item in self.items:
            for attr, stage in stages:
                if getattr(item.status, attr) is False:
                    failures[item.name].append(stage)
        return failures

    async def _run_item(self, item: WorkItem, worker: int = 0) -> None:
        self._logger.info(f'Running {self.noun} {item.name}')
        try:
            await item.run()
        except Exception as e:  # pylint: disable=broad-exception-caught
            item.status.compute_ok = False
            self._logger.exception(f'Worker {worker} failed on {self.noun} {item.name}',
                                   exc_info=e)

    async def _feed(self, items: Iterable[WorkItem], queue: asyncio.Queue) -> None:
        for item in items:
            self.items.append(item)
            await queue.put(item)
        for _ in range(self._workers):
            await queue.put(None)
        self._logger.debug(f'All {len(self.items)} {self.noun}s queued')

    async def _worker(self, worker: int, queue: asyncio.Queue) -> None:
        self._logger.debug(f'Worker {worker} started')
        while (item := await queue.get()) is not None:
            await self._run_item(item, worker)
        self._logger.debug(f'Worker {worker} done')

    async def _run_all(self, items: Iterable[WorkItem]) -> None:
        """ Run items on `--workers` concurrent workers, or one after the other with 0 """
        if self._workers == 0:
            for item in items:
                self.items.append(item)
                await self._run_item(item)
            return
        queue: asyncio.Queue = asyncio.Queue(maxsize=2 * self._workers)
        await asyncio.gather(self._feed(items, queue),
                             *(self._worker(w, queue) for w in range(1, self._workers + 1)))

    async def _execute(self) -> None:
        raise NotImplementedError

    async def run(self) -> int:
        """ Execute the command; returns 1 if any work item failed, else 0 """
        await self._execute()
        return 1 if self.report() else 0


class GenDataCli(BaseCli):
    """ `gen-data`: one simulation per work item """

    @property
    def noun(self) -> str:
        return 'simulation'

    async def _execute(self) -> None:
        count = self._args.simulations or self._settings.simulations
        out: pathlib.Path = self._args.out
        out.mkdir(parents=True, exist_ok=True)
        runners = (SimulationRunner(self._settings.sim_config(i, frames=self._args.frames), out)
                   for i in range(count))
        await self._run_all(runners)


class SliceCli(BaseCli):
    """ `slice`: one shard builder per simulation; shards are merged in simulation order """

    @property
    def noun(self) -> str:
        return 'simulation'

    def _sim_dirs(self) -> list[pathlib.Path]:
        dirs = sorted(d for d in self._args.in_dir.iterdir()
                      if d.is_dir() and sidecar_path(d, d.name).is_file())
        if not dirs:
            raise CliError(f'No simulations found under {self._args.in_dir}')
        return dirs

    async def _execute(self) -> None:
        s = self._settings
        g1 = load_generator(self._args.ckpt1, 1) if self._args.pass_index == 2 else None
        builders = [ShardBuilder(d, factor=s.factor, pass_index=self._args.pass_index,
                                 dataset=s.dataset_config(), augment=s.augment_config(),
                                 sim_id=i, g1=g1, inference=s.inference_config())
                    for i, d in enumerate(self._sim_dirs())]
        await self._run_all(builders)
        merged: dict[str, list] = collections.defaultdict(list)
        for b in builders:
            for name, samples in b.samples.items():
                merged[name] += samples
        meta = {'pass': self._args.pass_index, 'factor': s.factor,
                'g1_digest': builders[0].g1_digest}
        for name in (shard_name(self._args.pass_index, j) for j in builders[0].levels):
            path = write_shard(self._args.out / name, merged.get(name, []), meta)
            self._logger.info(f'Wrote {len(merged.get(name, []))} samples to {path}')


class TrainCli(BaseCli):
    """ `train` """

    async def _execute(self) -> None:
        a = self._args
        config = self._settings.train_config(a.pass_index, loss_kind=a.loss)
        self._logger.info(f'Training pass {a.pass_index} at {self._settings.factor}x for '
                          f'{a.iterations or config.total_iterations} iterations')
        if a.pass_index == 1:
            path = await asyncio.to_thread(train_first_pass, config, a.shards, a.out,
                                           factor=self._settings.factor, resume=a.resume,
                                           iterations=a.iterations)
        else:
            g1 = load_generator(a.ckpt1, 1)
            path = await asyncio.to_thread(train_second_pass, config, a.shards, g1, a.out,
                                           factor=self._settings.factor, resume=a.resume,
                                           iterations=a.iterations)
        print(f'Final checkpoint: {path}')


def _read_pair(args: argparse.Namespace) -> tuple[np.ndarray, np.ndarray]:
    return read_fvol(args.in_file), read_fvol(args.vel)


class InferCli(BaseCli):
    """ `infer`: two-pass up-scaling """

    async def _execute(self) -> None:
        a = self._args
        density, velocity = _read_pair(a)
        g1 = load_generator(a.ckpt1, 1)
        g2 = load_generator(a.ckpt2, 2)
        out = await asyncio.to_thread(multipass_upscale, density, velocity, g1, g2,
                                      self._settings.factor,
                                      self._settings.inference_config(dt_sim=a.dt_sim))
        write_fvol(a.out, out)
        self._logger.info(f'Wrote {out.shape} volume to {a.out}')


class InferAxisCli(BaseCli):
    """ `infer-axis`: single-network up-scaling along one axis """

    async def _execute(self) -> None:
        a = self._args
        density, velocity = _read_pair(a)
        g1 = load_generator(a.ckpt1, 1)
        out = await asyncio.to_thread(single_axis_upscale, density, velocity, g1,
                                      self._settings.factor, a.axis,
                                      config=self._settings.inference_config(dt_sim=a.dt_sim))
        write_fvol(a.out, out)
        self._logger.info(f'Wrote {out.shape} volume to {a.out}')


class CombineCli(BaseCli):
    """ `combine` """

    async def _execute(self) -> None:
        a = self._args
        volumes = [read_fvol(p) for p in a.inputs]
        upsampled = None
        if a.upsampled:
            upsampled = read_fvol(a.upsampled)
        elif a.lr:
            lr = read_fvol(a.lr)
            upsampled = upsample_trilinear(lr, volumes[0].shape[0] // lr.shape[0])
        out = combine_axes(volumes, a.mode, a.base_axis, upsampled)
        write_fvol(a.out, out.astype(np.float32))


class BenchCli(BaseCli):
    """ `bench` """

    def _generator(self, ckpt: pathlib.Path | None, pass_index: int) -> Generator:
        if ckpt:
            return load_generator(ckpt, pass_index)
        return build_network(generator_spec(pass_index, self._settings.factor))  # type: ignore

    async def _execute(self) -> None:
        a = self._args
        s = self._settings
        config = s.bench_config(frames=a.frames, substeps=a.substeps)
        bench = Benchmark(config, s.factor, self._generator(a.ckpt1, 1),
                          self._generator(a.ckpt2, 2), s.inference_config())
        fit = await asyncio.to_thread(bench.bench_inference, a.sizes)
        table_sizes = a.solver_sizes or config.table_sizes
        solver = await asyncio.to_thread(bench.bench_solver, table_sizes)
        timed = {r.resolution[0] // s.factor for r in fit}
        missing = [n for n in table_sizes if n not in timed]
        extra = await asyncio.to_thread(bench.bench_inference, missing) if missing else []
        write_records(a.out, [*fit, *extra, *solver])
        self._logger.info(f'Wrote {len(fit) + len(extra) + len(solver)} timings to {a.out}')
        if a.table:
            table = bench.render_performance_table(solver, [*fit, *extra], fit)
            atomic_write_bytes(a.table, table.encode('utf-8'))
            print(table)


class RenderCli(BaseCli):
    """ `render` """

    async def _execute(self) -> None:
        a = self._args
        render_slice(read_fvol(a.in_file), a.axis, a.index, a.out)


class PsnrCli(BaseCli):
    """ `psnr`: prints the value, or `identical` """

    async def _execute(self) -> None:
        print(format_psnr(psnr(read_fvol(self._args.a), read_fvol(self._args.b),
                               self._args.peak)))


class PlotLossesCli(BaseCli):
    """ `plot-losses`: one curve per log, labelled by file stem """

    async def _execute(self) -> None:
        a = self._args
        plot_losses({p.stem: p for p in a.logs}, a.out, a.term)


COMMANDS: dict[CommandType, type[BaseCli]] = {
    CommandType.GEN_DATA: GenDataCli,
    CommandType.SLICE: SliceCli,
    CommandType.TRAIN: TrainCli,
    CommandType.INFER: InferCli,
    CommandType.INFER_AXIS: InferAxisCli,
    CommandType.COMBINE: CombineCli,
    CommandType.BENCH: BenchCli,
    CommandType.RENDER: RenderCli,
    CommandType.PSNR: PsnrCli,
    CommandType.PLOT_LOSSES: PlotLossesCli,
}
