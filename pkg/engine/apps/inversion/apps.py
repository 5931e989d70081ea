from django.apps import AppConfig


class InversionConfig(AppConfig):
    name = 'apps.inversion'
    verbose_name = 'Coefficient inversion'
