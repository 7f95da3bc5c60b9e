from fastapi import APIRouter, HTTPException

import schemas
from errors import LinkAdaptError
from harness import linkstats_report

router = APIRouter(prefix="/api/linkstats", tags=["Link statistics"])


@router.post("")
def compute_linkstats(payload: schemas.LinkStatsRequest):
    """Thresholds, feedback laws and optimal outage targets for the requested SNRs."""
    try:
        return linkstats_report(payload.config, payload.bs_index, payload.snr_db, payload.bt_sizes, payload.rho_db)
    except LinkAdaptError as exc:
        raise HTTPException(status_code=422, detail=exc.to_dict())
    except ValueError as exc:
        raise HTTPException(status_code=422, detail={"error": "INVALID_ARGUMENT", "message": str(exc)})
