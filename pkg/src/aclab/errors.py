"""Shared exception types, mapped to CLI exit codes."""


class AclabError(Exception):
    pass


class ConfigError(AclabError):
    exit_code = 2


class MissingArtifactError(AclabError):
    exit_code = 3


class NumericalFailure(AclabError):
    exit_code = 4
