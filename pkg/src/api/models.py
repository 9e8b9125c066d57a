"""
Pydantic models for API request/response
"""
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class RunRequest(BaseModel):
    config: str = Field(..., description="Experiment config in the INI format of configs/*.ini")
    jobs: Optional[int] = Field(None, ge=1)
    no_clamp: bool = False
    seeds: Optional[List[int]] = None


class RunResponse(BaseModel):
    name: str
    rows: List[Dict[str, Any]]
    summary: List[Dict[str, Any]]
    summary_text: str
    failed: int


class SummarizeRequest(BaseModel):
    rows: List[Dict[str, Any]]


class SummarizeResponse(BaseModel):
    summary: List[Dict[str, Any]]
    summary_text: str


class LinsemRequest(BaseModel):
    sigma_XY: float
    sigma_XX: float
    sigma_XW: List[float]
    sigma_YW: List[float]
    sigma_VW: Optional[List[List[float]]] = None
    sigma_WZ: Optional[List[List[float]]] = None
    sigma_VZ: Optional[List[List[float]]] = None
    beta_WU: Optional[List[List[float]]] = None
    sigma_UU: Optional[List[List[float]]] = None


class LinsemResponse(BaseModel):
    tau_external: Optional[float] = None
    tau_three_view: Optional[float] = None
    condition_numbers: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    errors: Dict[str, str] = Field(default_factory=dict)
