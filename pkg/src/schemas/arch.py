from typing import Annotated, List, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .gnpp import GnppConfig, NeighborhoodType


class _Layer(BaseModel):
    model_config = ConfigDict(frozen=True)


class Conv(_Layer):
    kind: Literal["conv"] = "conv"
    k: int = Field(..., gt=0)
    stride: int = Field(1, gt=0)
    pad: int = Field(0, ge=0)
    out_channels: int = Field(..., gt=0)


class MaxPool(_Layer):
    kind: Literal["maxpool"] = "maxpool"
    k: int = Field(..., gt=0)
    stride: int = Field(..., gt=0)


class AvgPool(_Layer):
    kind: Literal["avgpool"] = "avgpool"
    k: int = Field(..., gt=0)
    stride: int = Field(..., gt=0)


class Fc(_Layer):
    kind: Literal["fc"] = "fc"
    out: int = Field(..., gt=0)


class Dropout(_Layer):
    kind: Literal["dropout"] = "dropout"
    ratio: float = Field(..., ge=0.0, lt=1.0)


class Gnpp(_Layer):
    kind: Literal["gnpp"] = "gnpp"
    nb_type: NeighborhoodType = NeighborhoodType.TYPE1
    sigma: float = Field(1.0, gt=0.0, le=1.0)

    @property
    def config(self) -> GnppConfig:
        return GnppConfig(nb_type=self.nb_type, sigma=self.sigma)


class GaussBlur(_Layer):
    kind: Literal["gaussblur"] = "gaussblur"
    std: float = Field(..., gt=0.0)


LayerDesc = Annotated[
    Union[Conv, MaxPool, AvgPool, Fc, Dropout, Gnpp, GaussBlur],
    Field(discriminator="kind"),
]

POOL_TYPES = (MaxPool, AvgPool)


class ArchSpec(BaseModel):
    """Parsed architecture: an ordered layer list plus the text it came from."""

    model_config = ConfigDict(frozen=True)

    layers: List[LayerDesc] = Field(..., min_length=1)
    source_text: str = ""

    @model_validator(mode="after")
    def check_classifier(self):
        if not isinstance(self.layers[-1], Fc):
            raise ValueError("final layer must be a fully-connected classifier")
        return self

    # Two specs are equal when their layers are; the source text is only a record
    def __eq__(self, other):
        if not isinstance(other, ArchSpec):
            return NotImplemented
        return self.layers == other.layers

    def __hash__(self):
        return hash(tuple(self.layers))

    def pool_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, POOL_TYPES)]

    def conv_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv)]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out
