class DentmeshException(Exception):
    # usage errors map to exit code 2 in the command line frontend
    usage = False


class ConfigError(DentmeshException):
    usage = True


class ParseError(DentmeshException):
    usage = True


class LabelMismatch(DentmeshException):
    usage = True


class LengthMismatch(DentmeshException):
    usage = True


class ShapeMismatch(DentmeshException):
    usage = True


class InvalidGrid(DentmeshException):
    usage = True


class InvalidClass(DentmeshException):
    usage = True


class DegenerateMesh(DentmeshException):
    pass


class TargetUnreachable(DentmeshException):
    pass


class MissingLabels(DentmeshException):
    pass


class TooFewBoundaryPoints(DentmeshException):
    pass


class NoVisiblePoints(DentmeshException):
    pass


class FrameMismatch(DentmeshException):
    pass
