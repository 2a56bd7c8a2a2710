from enum import Enum
from typing import Any, Sequence, TYPE_CHECKING

if TYPE_CHECKING:
    from .signal_monitor import FeatureVector, SignalWindow


class PayloadKind(Enum):
    EmergencyNotificationWithRaw = "emergency_notification_with_raw"
    FeaturesOnly = "features_only"
    PhysicianRepeatNotice = "physician_repeat_notice"


class SharePayload:
    def __init__(
        self,
        kind: PayloadKind,
        patient_id: str | None = None,
        features: Sequence["FeatureVector"] = (),
        raw: Sequence["SignalWindow"] = (),
        channel_ids: Sequence[int] = (),
    ) -> None:
        self.kind = kind
        self.patient_id = patient_id
        self.features = tuple(features) if kind is not PayloadKind.PhysicianRepeatNotice else ()
        self.raw = tuple(raw) if kind is PayloadKind.EmergencyNotificationWithRaw else ()
        self.channel_ids = tuple(channel_ids) if kind is PayloadKind.PhysicianRepeatNotice else ()

    @property
    def destined_for_chain(self) -> bool:
        # Repeat notices go to the physician, not to the ledger
        return self.kind is not PayloadKind.PhysicianRepeatNotice

    def dict(self) -> dict[str, Any]:
        result: dict[str, Any] = {"kind": self.kind.value}

        if self.patient_id is not None:
            result["patient"] = self.patient_id
        if self.features:
            result["features"] = [fv.dict() for fv in self.features]
        if self.raw:
            result["raw"] = [
                {
                    "channel": w.channel_id,
                    "session": w.session.value,
                    "samples": len(w.samples),
                }
                for w in self.raw
            ]
        if self.channel_ids:
            result["channels"] = list(self.channel_ids)

        return result
