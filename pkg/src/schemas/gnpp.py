from enum import Enum
from typing import List, Tuple

from pydantic import BaseModel, ConfigDict, Field


class NeighborhoodType(str, Enum):
    TYPE1 = "type1"  # 4 axis-aligned side words
    TYPE2 = "type2"  # axis-aligned plus diagonals

    @property
    def token(self) -> str:
        return "G1" if self is NeighborhoodType.TYPE1 else "G2"


AXIAL_OFFSETS: Tuple[Tuple[int, int], ...] = ((-1, 0), (1, 0), (0, -1), (0, 1))
DIAGONAL_OFFSETS: Tuple[Tuple[int, int], ...] = ((-1, -1), (-1, 1), (1, -1), (1, 1))


class GnppConfig(BaseModel):
    """Neighborhood type and smoothing parameter of a GNPP layer.

    `offsets` lists (dy, dx, weight) in the order used to break max ties.
    """

    model_config = ConfigDict(frozen=True)

    nb_type: NeighborhoodType = NeighborhoodType.TYPE1
    sigma: float = Field(1.0, gt=0.0, le=1.0)

    @property
    def offsets(self) -> List[Tuple[int, int, float]]:
        table = [(dy, dx, self.sigma) for dy, dx in AXIAL_OFFSETS]
        if self.nb_type is NeighborhoodType.TYPE2:
            table += [(dy, dx, self.sigma ** 2) for dy, dx in DIAGONAL_OFFSETS]
        return table

    @property
    def k(self) -> int:
        return len(self.offsets)
