"""Exception types shared across the package."""


class KohscanError(Exception):
    """Base class for package-specific failures."""


class ManifestError(KohscanError):
    """Malformed, inconsistent or unresolvable manifest content."""


class BundleError(KohscanError):
    """Problems reading or writing a model bundle."""


class BundleFormatError(BundleError):
    """The bundle's format_version is not supported by this build."""


class BundleIntegrityError(BundleError):
    """The bundle's weight blob does not match its recorded checksum."""
