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
import asyncio
import pprint
import sys

import torch

from .cli import COMMANDS, BaseCli, parse_args
from .config import Settings
from .exc import CliError, CliWarning, ConfigError, NumericalError, ValidationError
from .util import ROOT_LOGGER, setup_logger, verbosity_level

EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def main() -> int:
    """Main CLI entry point

    Returns:
        0 on success, 1 if any work item failed, 2 on invalid arguments, configuration or
        inputs, 3 on a numerical failure
    """
    try:
        args = parse_args()
    except CliError:
        sys.exit(EXIT_USAGE)

    logger = setup_logger(ROOT_LOGGER, level=verbosity_level(args.verbose, args.quiet))
    logger.debug(f'Arguments: {pprint.pformat(vars(args))}')
    logger.debug(f'Python {sys.version.split()[0]}, torch {torch.__version__} '
                 f'with {torch.get_num_threads()} threads')

    try:
        settings = Settings.load(args.config,
                                 logger=logger,
                                 seed=args.seed,
                                 factor=getattr(args, 'factor', None),
                                 scale=getattr(args, 'scale', None))
        cli: BaseCli = COMMANDS[args.type](
            logger=logger,
            settings=settings,
            args=args,
            workers=args.workers,
        )
        return asyncio.run(cli.run())
    except (CliError, ConfigError, ValidationError) as e:
        logger.error(e)
        return EXIT_USAGE
    except NumericalError as e:
        logger.error(f'Numerical failure: {e}')
        return EXIT_NUMERICAL
    except CliWarning as e:
        logger.error(e)
        return 1


if __name__ == '__main__':
    sys.exit(main())
