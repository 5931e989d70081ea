from apps.experiments.models import ExperimentName
from apps.experiments.runner import ExperimentCommand
from apps.experiments.services import ExperimentService


class Command(ExperimentCommand):
    help = 'Recover drift or noise intensity from an invariant density.'
    experiment = ExperimentName.INVERT

    def run(self, config, run_dir, options):
        return ExperimentService.run_invert(config, run_dir, options)
