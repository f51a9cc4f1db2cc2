"""Exception hierarchy shared by all planescene modules."""


class PlaneSceneError(Exception):
    """Base class for all errors raised by this package."""


class InputError(PlaneSceneError):
    """User-supplied input (files, config, CLI arguments) is invalid."""


class ShapeError(PlaneSceneError):
    """Raster or array dimensions do not match."""


class BoundsError(PlaneSceneError):
    """A pixel coordinate lies outside the image bounds."""


class InsufficientDataError(PlaneSceneError):
    """Too few (or too degenerate) samples to run an estimator."""


class DegenerateGeometryError(PlaneSceneError):
    """Geometric construction is ill-posed (collinear points, zero extent,
    zero-length look-at, ...)."""


class EmptySceneError(PlaneSceneError):
    """No observed geometry to work with (no valid depth, no visible voxels)."""


class CapacityError(PlaneSceneError):
    """A requested resolution exceeds the configured memory cap."""


class UnobservablePlaneError(PlaneSceneError):
    """A plane is not observed by any view."""


class DependencyError(PlaneSceneError):
    """A pipeline stage is missing an output of an earlier stage."""
