from apps.experiments.models import ExperimentName
from apps.experiments.runner import ExperimentCommand
from apps.experiments.services import ExperimentService


class Command(ExperimentCommand):
    help = 'Closed-form or Gibbs density grid with normalization and Fokker-Planck residual.'
    experiment = ExperimentName.DENSITY

    def run(self, config, run_dir, options):
        return ExperimentService.run_density(config, run_dir, options)
