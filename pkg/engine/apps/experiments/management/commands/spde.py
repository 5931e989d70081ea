from apps.experiments.models import ExperimentName
from apps.experiments.runner import ExperimentCommand
from apps.experiments.services import ExperimentService


class Command(ExperimentCommand):
    help = 'Galerkin reaction-diffusion equilibrium, mode statistics and inversion.'
    experiment = ExperimentName.SPDE

    def run(self, config, run_dir, options):
        return ExperimentService.run_spde(config, run_dir, options)
