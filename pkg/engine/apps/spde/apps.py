from django.apps import AppConfig


class SpdeAppConfig(AppConfig):
    name = 'apps.spde'
    verbose_name = 'Spectral Galerkin reaction-diffusion'
