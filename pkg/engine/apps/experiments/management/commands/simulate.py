from apps.experiments.models import ExperimentName
from apps.experiments.runner import ExperimentCommand
from apps.experiments.services import ExperimentService


class Command(ExperimentCommand):
    help = 'Sample the equilibrium of an SDE and compare it with the closed-form density.'
    experiment = ExperimentName.SIMULATE

    def run(self, config, run_dir, options):
        return ExperimentService.run_simulate(config, run_dir, options)
