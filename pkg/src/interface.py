"""
This module handles the command-line interface of the toolkit.
- Every subcommand is a Command object bound to one controller stage.
- CommandLine parses arguments, builds the controller and maps failures to exit codes.
"""

import argparse
from src.app_controller import RELOCATION_PLACEMENTS, ExperimentController
from src.logger import logger
from src.utils import ToolkitError, explain_config, user_print


class Command:
    """Base class for all commands."""
    name = None
    help = ""
    needs_controller = True

    def add_arguments(self, parser):
        pass

    def execute(self, controller, args):
        raise NotImplementedError


class GenTrajectoriesCommand(Command):
    """Generates and validates Ford-Fulkerson trajectories."""
    name = "gen-trajectories"
    help = "generate max-flow trajectories for NAR training"

    def execute(self, controller, args):
        controller.gen_trajectories()


class TrainNarCommand(Command):
    """Trains the NAR on stored trajectories."""
    name = "train-nar"
    help = "train the neural algorithmic reasoner"

    def execute(self, controller, args):
        controller.train_nar()


class SimulateCommand(Command):
    """Simulates the network splits."""
    name = "simulate"
    help = "simulate train, calibration, test and control pressure series"

    def execute(self, controller, args):
        controller.simulate()


class TrainModelsCommand(Command):
    """Trains reconstructor and predictor variants."""
    name = "train-models"
    help = "train AIGNN and ChebNet reconstructors and predictors"

    def execute(self, controller, args):
        controller.train_models()


class EvaluateCommand(Command):
    """Evaluates trained models and writes node series."""
    name = "evaluate"
    help = "evaluate trained models on the test split"

    def execute(self, controller, args):
        controller.evaluate()


class CalibrateCommand(Command):
    """Calibrates the detection threshold."""
    name = "calibrate"
    help = "calibrate xi on the calibration split"

    def execute(self, controller, args):
        controller.calibrate()


class DetectCommand(Command):
    """Runs leak detection on the test and control splits."""
    name = "detect"
    help = "detect leaks with the calibrated threshold"

    def execute(self, controller, args):
        controller.detect()


class CompareCommand(Command):
    """Writes the comparison table."""
    name = "compare"
    help = "tabulate relative errors of all variants"

    def execute(self, controller, args):
        controller.compare()


class RelocateSensorsCommand(Command):
    """Evaluates models under random sensor placements."""
    name = "relocate-sensors"
    help = "evaluate trained models with relocated sensors"

    def add_arguments(self, parser):
        parser.add_argument("--placements", type=int, default=RELOCATION_PLACEMENTS,
                            help="number of random sensor placements")

    def execute(self, controller, args):
        if args.placements < 1:
            raise ToolkitError("--placements must be at least 1")
        controller.relocate_sensors(args.placements)


class ExplainCommand(Command):
    """Explains the structure of the configuration file."""
    name = "explain"
    help = "explain the config file structure"
    needs_controller = False

    def execute(self, controller, args):
        explain_config()


class RunAllCommand(Command):
    """Runs the whole workflow."""
    name = "run-all"
    help = "run every stage in order"

    def execute(self, controller, args):
        controller.run_all()


COMMANDS = [GenTrajectoriesCommand(), TrainNarCommand(), SimulateCommand(), TrainModelsCommand(),
            EvaluateCommand(), CompareCommand(), CalibrateCommand(), DetectCommand(),
            RelocateSensorsCommand(), ExplainCommand(), RunAllCommand()]


class CommandLine:
    """
    Main class for the command-line interface.
    """
    def __init__(self, default_config, controller_factory=ExperimentController):
        """
        Args:
            default_config (str): Config path used when --config is not given.
            controller_factory (callable): Builds the controller from (config_path, seed, jobs, output_dir).
        """
        self.default_config = default_config
        self.controller_factory = controller_factory
        self.commands = {cmd.name: cmd for cmd in COMMANDS}
        self.parser = self.build_parser()

    def build_parser(self):
        parser = argparse.ArgumentParser(prog="aignn-leaks",
                                         description="Algorithm-informed GNNs for leak detection in water networks")
        sub = parser.add_subparsers(dest="command", required=True)
        for cmd in self.commands.values():
            p = sub.add_parser(cmd.name, help=cmd.help)
            p.add_argument("--config", default=self.default_config, help="path to config.json")
            p.add_argument("--seed", type=int, default=None, help="override the base seed")
            p.add_argument("--jobs", type=int, default=None, help="override the worker count")
            p.add_argument("--out", default=None, help="override the output directory")
            cmd.add_arguments(p)
        return parser

    def run(self, argv=None):
        """
        Parses arguments and executes one command.

        Returns:
            int: 0 on success, 1 for toolkit errors, 2 for unexpected failures.
        """
        args = self.parser.parse_args(argv)
        cmd = self.commands[args.command]
        try:
            controller = None
            if cmd.needs_controller:
                controller = self.controller_factory(args.config, seed=args.seed, jobs=args.jobs,
                                                     output_dir=args.out)
            cmd.execute(controller, args)
            return 0
        except ToolkitError as e:
            user_print(f"{cmd.name} failed: {e}", level="error")
            return 1
        except KeyboardInterrupt:
            user_print("KeyboardInterrupt received. Exiting.", level="error")
            return 1
        except Exception as e:
            logger.exception(f"Unexpected error in {cmd.name}: {e}")
            user_print(f"{cmd.name} failed unexpectedly: {e}", level="error")
            return 2
