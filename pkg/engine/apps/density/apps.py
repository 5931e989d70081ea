from django.apps import AppConfig


class DensityConfig(AppConfig):
    name = 'apps.density'
    verbose_name = 'Density grids'
