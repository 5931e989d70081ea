from apps.experiments.models import ExperimentName
from apps.experiments.runner import ExperimentCommand
from apps.experiments.services import ExperimentService


class Command(ExperimentCommand):
    help = 'Build a gauge or skew family and test whether its equilibrium can be told apart.'
    experiment = ExperimentName.COUNTEREXAMPLE

    def run(self, config, run_dir, options):
        return ExperimentService.run_counterexample(config, run_dir, options)
