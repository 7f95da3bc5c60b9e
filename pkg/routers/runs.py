import csv
import io
from typing import List, Optional

from fastapi import APIRouter, Depends, HTTPException, Query, status
from fastapi.responses import StreamingResponse
from sqlalchemy.orm import Session

import models
import schemas
from database import get_db
from harness import RESULT_HEADER

router = APIRouter(prefix="/api/runs", tags=["Runs"])


def _get_run_or_404(run_id: int, db: Session) -> models.Run:
    run = db.query(models.Run).filter(models.Run.id == run_id).first()
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return run


def _run_out(run: models.Run) -> dict:
    return {
        "id": run.id,
        "kind": run.kind.value if hasattr(run.kind, "value") else run.kind,
        "config_hash": run.config_hash,
        "seed": run.seed,
        "mode": run.mode,
        "output_dir": run.output_dir,
        "status": run.status,
        "created_at": run.created_at,
        "result_count": len(run.results),
    }


@router.get("", response_model=List[schemas.RunOut])
def list_runs(
    kind: Optional[str] = Query(None),
    config_hash: Optional[str] = Query(None),
    db: Session = Depends(get_db),
):
    q = db.query(models.Run)
    if kind:
        try:
            q = q.filter(models.Run.kind == models.RunKind(kind))
        except ValueError:
            raise HTTPException(status_code=422, detail=f"Unknown run kind: {kind}")
    if config_hash:
        q = q.filter(models.Run.config_hash == config_hash)
    runs = q.order_by(models.Run.created_at.desc(), models.Run.id.desc()).all()
    return [_run_out(r) for r in runs]


@router.get("/{run_id}", response_model=schemas.RunDetailOut)
def get_run(run_id: int, db: Session = Depends(get_db)):
    run = _get_run_or_404(run_id, db)
    out = _run_out(run)
    out["results"] = run.results
    return out


@router.delete("/{run_id}", status_code=status.HTTP_204_NO_CONTENT)
def delete_run(run_id: int, db: Session = Depends(get_db)):
    run = _get_run_or_404(run_id, db)
    db.delete(run)
    db.commit()


@router.get("/{run_id}/export/csv")
def export_run_csv(run_id: int, db: Session = Depends(get_db)):
    run = _get_run_or_404(run_id, db)

    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(RESULT_HEADER)
    for r in run.results:
        writer.writerow([
            r.policy,
            r.variable or "",
            r.label if r.label is not None else ("" if r.value is None else r.value),
            r.mode,
            "" if r.spectral_efficiency is None else r.spectral_efficiency,
            "" if r.se_ci_low is None else r.se_ci_low,
            "" if r.se_ci_high is None else r.se_ci_high,
            "" if r.power_w is None else r.power_w,
            "" if r.power_dbm is None else r.power_dbm,
            "",
            "",
            r.episodes,
            r.status,
            "",
        ])

    output.seek(0)
    return StreamingResponse(
        iter([output.getvalue()]),
        media_type="text/csv",
        headers={"Content-Disposition": f"attachment; filename=run_{run_id}_results.csv"},
    )
