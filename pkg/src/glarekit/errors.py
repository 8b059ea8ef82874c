"""Exception hierarchy.  Every error carries a module-qualified ``code`` that
the command line surfaces in its JSON error records."""


class GlareKitError(Exception):
    code = "glarekit.error"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context

    def to_dict(self) -> dict:
        return {"code": self.code, "message": str(self), **self.context}


class FormatError(GlareKitError):
    code = "radiance.format"


class DimensionError(GlareKitError):
    code = "radiance.dimension"


class DegeneratePatchError(GlareKitError):
    code = "radiance.degenerate_patch"


class StackError(GlareKitError):
    code = "hdrmerge.stack"


class ParameterError(GlareKitError):
    code = "gsf.parameter"


class KernelError(GlareKitError):
    code = "gsf.kernel"


class ObjectiveError(GlareKitError):
    code = "calib.objective"


class ValidationError(GlareKitError):
    code = "calib.validation"


class DegenerateImageError(GlareKitError):
    code = "deglare.degenerate"


class EstimationError(GlareKitError):
    code = "deglare.estimation"


class SpecError(GlareKitError):
    code = "synth.spec"


class ConfigError(GlareKitError):
    code = "cli.config"
