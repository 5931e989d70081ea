from apps.experiments.acceptance import AcceptanceSuite, default_tolerances
from apps.experiments.models import ExperimentName
from apps.experiments.runner import ExperimentCommand
from apps.experiments.serializers import AcceptanceSectionSerializer


class Command(ExperimentCommand):
    help = 'Run the acceptance criteria; exits 6 when a binding check fails.'
    experiment = ExperimentName.ACCEPTANCE
    config_required = False
    seed_section = 'acceptance'
    enforce_checks = True

    def run(self, config, run_dir, options):
        config.require_sections(('acceptance',))
        section = config.validate(
            'acceptance', AcceptanceSectionSerializer, required=False, tolerances=default_tolerances(),
        )
        data = section.validated_data
        suite = AcceptanceSuite(
            run_dir,
            seed=options.seed,
            criteria=data.get('criteria'),
            overrides=data.get('tolerances'),
            quick=options.quick,
            quick_factor=options.quick_factor,
            stated_runs=data.get('stated_runs', False),
        )
        return suite.run()
