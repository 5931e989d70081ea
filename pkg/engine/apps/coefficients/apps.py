from django.apps import AppConfig


class CoefficientsConfig(AppConfig):
    name = 'apps.coefficients'
    verbose_name = 'SDE coefficients'
