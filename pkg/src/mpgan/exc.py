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
# pylint: disable=unnecessary-pass
class CliWarning(Warning):
    """For use when a non-fatal error is encountered in the CLI flow, such as a single
    simulation or benchmark size failing inside a worker pool.  The remaining work
    continues and the failure is reported in the final summary.
    """
    pass


class CliError(Exception):
    """For use when a fatal error is encountered in the CLI flow; the command exits
    with the validation exit code
    """
    pass


class ConfigWarning(Warning):
    """ For use when a configuration file carries something that can be ignored, such as
    an unknown key in a known section
    """
    pass


class ConfigError(Exception):
    """ For use when a configuration value is invalid and the program should exit
    non-zero immediately
    """
    pass


class ValidationError(ValueError):
    """ Raised by library calls on shape, dimension or argument violations, e.g. advecting
    a field with a velocity defined on a different grid
    """
    pass


class VolumeIOError(CliError):
    """ Reading or writing a volume, shard or checkpoint file failed; the message always
    names the offending path
    """
    pass


class NumericalError(ArithmeticError):
    """ NaN inputs to the solver, or a training run that diverged """
    pass
