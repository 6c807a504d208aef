"""Channel families: which modalities are stacked into a patch."""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Final

import numpy as np

from lesionstack.exceptions import ConfigurationError
from lesionstack.volstore import Modality

if TYPE_CHECKING:
    from collections.abc import Mapping

    from numpy.typing import NDArray


class ChannelFamily(ABC):
    """Interface for channel stacking strategies."""

    name: str

    @property
    @abstractmethod
    def modalities(self) -> tuple[Modality, ...]:
        """Modalities stacked as channels, in channel order."""

    @property
    def channels(self) -> int:
        """Number of channels."""
        return len(self.modalities)

    def stack(
        self,
        arrays: Mapping[Modality, NDArray[np.floating]],
    ) -> NDArray[np.floating]:
        """Stack per-modality (z, y, x) arrays into (c, z, y, x).

        Args:
            arrays: One equally shaped array per modality.

        Returns:
            The channel-first stack in this family's channel order.
        """
        return np.stack([arrays[m] for m in self.modalities], axis=0)


class CompositeFamily(ChannelFamily):
    """T2w, ADC and DWI concatenated into a 3-channel composite."""

    name = "composite"

    @property
    def modalities(self) -> tuple[Modality, ...]:
        """T2w, ADC, DWI in that fixed order."""
        return Modality.T2W, Modality.ADC, Modality.DWI


class SoloFamily(ChannelFamily):
    """Ktrans alone as a 1-channel volume."""

    name = "solo"

    @property
    def modalities(self) -> tuple[Modality, ...]:
        """Ktrans only."""
        return (Modality.KTRANS,)


class ChannelFamilyService:
    """Provides access to the channel families by name."""

    def __init__(self) -> None:
        """Initialize the service with the available families."""
        self._families: dict[str, ChannelFamily] = {
            family.name: family for family in (CompositeFamily(), SoloFamily())
        }

    @property
    def names(self) -> tuple[str, ...]:
        """Family names in canonical order."""
        return tuple(self._families)

    def get_family(self, name: str) -> ChannelFamily:
        """Retrieve a family by name.

        Raises:
            ConfigurationError: If the name is unknown.
        """
        try:
            return self._families[name]
        except KeyError:
            raise ConfigurationError(
                f"unknown channel family {name!r}; expected one of "
                f"{self.names}",
            ) from None


FAMILIES: Final = ChannelFamilyService()
