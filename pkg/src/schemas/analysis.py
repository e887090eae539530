from pydantic import BaseModel, Field


class RfInfo(BaseModel):
    """Receptive-field geometry of one layer, in input pixels."""

    rf: int = Field(..., ge=1)
    jump: int = Field(..., ge=1)
    # Center of neuron (0, 0) in input coordinates
    start: float = 0.0

    @property
    def overlap(self) -> float:
        return max(0.0, (self.rf - self.jump) / self.rf)

    def center(self, index: int) -> float:
        return self.start + index * self.jump


class GradcheckRow(BaseModel):
    layer: str
    checked: int
    max_rel_error: float
    passed: bool
