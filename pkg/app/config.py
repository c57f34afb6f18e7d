"""Configuración de la aplicación y de las sesiones usando Pydantic Settings.

Hay dos niveles de configuración:

- ``Settings``: parámetros del proceso (logging, directorios, servidor HTTP),
  leídos del entorno o de ``.env`` y cacheados con ``get_settings()``.
- ``SessionConfig``: parámetros físicos y de protocolo de una sesión simulada,
  leídos de un archivo de texto ``clave=valor`` en unidades SI. Nunca consulta
  variables de entorno: el par (archivo, semilla) determina la sesión completa.
"""

import logging
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
)

from app.errors import ConfigurationError

logger = logging.getLogger(__name__)

# Directorios del proyecto
PROJECT_ROOT = Path(__file__).parent.parent
CONFIG_DIR = PROJECT_ROOT / "config"
DEFAULT_SESSION_CONFIG = CONFIG_DIR / "default.env"
DEFAULT_THRESHOLD_PROFILE = CONFIG_DIR / "threshold_profile.txt"


class Settings(BaseSettings):
    """Configuración del proceso cargada desde variables de entorno."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Application
    environment: str = Field(default="development", description="Entorno de ejecución")
    log_level: str = Field(default="INFO", description="Nivel de logging")
    data_dir: Path = Field(
        default=Path("./sessions"), description="Directorio raíz de las sesiones persistidas"
    )
    default_config_path: Path = Field(
        default=DEFAULT_SESSION_CONFIG,
        description="Archivo de configuración de sesión usado si no se indica otro",
    )

    # Server
    host: str = Field(default="0.0.0.0", description="Host del servidor")
    port: int = Field(default=8000, description="Puerto del servidor")


@lru_cache
def get_settings() -> Settings:
    """Obtiene la configuración del proceso (cached)."""
    return Settings()


# ==================== ENUMS ====================


class Scenario(str, Enum):
    """Escenarios de sesión soportados."""

    NO_EVE = "NO_EVE"
    EVE_FAKED_STATE = "EVE_FAKED_STATE"
    INTERCEPT_RESEND_NO_BLINDING = "INTERCEPT_RESEND_NO_BLINDING"
    EVE_ELLIPTICAL = "EVE_ELLIPTICAL"

    @property
    def has_eve(self) -> bool:
        return self is not Scenario.NO_EVE

    @property
    def blinds_bob(self) -> bool:
        return self in (Scenario.EVE_FAKED_STATE, Scenario.EVE_ELLIPTICAL)


class DoubleClickPolicy(str, Enum):
    """Tratamiento de clics simultáneos en Bob."""

    DISCARD = "DISCARD"
    RANDOM = "RANDOM"


class BlockSchedule(str, Enum):
    """Evolución del tamaño de bloque de Cascade entre pasadas."""

    HALVING = "halving"
    DOUBLING = "doubling"


class PrepulseMode(str, Enum):
    """Polarización del pre-pulso respecto al detector objetivo."""

    ORTHOGONAL = "orthogonal"
    SAME = "same"


# ==================== MODELOS ====================


class SourceConfig(BaseModel):
    """Fuente de pares entrelazados."""

    pair_rate_hz: float = Field(default=116_400.0, gt=0, description="Tasa de pares emitidos (Hz)")
    q_intrinsic: float = Field(
        default=0.055, ge=0, le=0.5, description="Probabilidad de error intrínseco por base"
    )


class ChannelParams(BaseModel):
    """Línea de fibra entre Alice y Bob."""

    length_m: float = Field(default=290.0, ge=0, description="Longitud de la fibra (m)")
    loss_db: float = Field(default=3.0, ge=0, description="Pérdida total de la línea (dB)")
    group_delay_ns_per_m: float = Field(
        default=5.0, ge=0, description="Retardo de grupo de la fibra (ns/m)"
    )


class DetectorConfig(BaseModel):
    """Parámetros comunes de los fotodiodos de avalancha."""

    efficiency: float = Field(default=0.5, ge=0, le=1, description="Eficiencia de detección")
    deadtime_ns: float = Field(default=1000.0, ge=0, description="Tiempo muerto tras un clic (ns)")
    jitter_fwhm_ps: float = Field(default=500.0, ge=0, description="Jitter en modo Geiger (ps)")
    blinded_jitter_fwhm_ps: float = Field(
        default=160.0, ge=0, description="Jitter de los clics en modo cegado (ps)"
    )
    dark_rate_hz: float = Field(default=500.0, ge=0, description="Tasa de cuentas oscuras (Hz)")
    blind_threshold_w: float = Field(
        default=38e-12, gt=0, description="Potencia c.w. que ciega al detector (W)"
    )
    threshold_profile_path: Path = Field(
        default=DEFAULT_THRESHOLD_PROFILE,
        description="Tabla de umbrales (cw, p_never, p_always) en W",
    )
    scale_factors: list[float] = Field(
        default=[1.6, 1.0, 1.0, 1.0],
        description="Multiplicador de umbral por puerto en orden V, -45, H, +45",
    )
    recovery_full_ns: float = Field(
        default=1000.0, gt=0, description="Separación a partir de la cual no hay cross-talk (ns)"
    )
    recovery_min_ns: float = Field(
        default=550.0, ge=0, description="Separación con recuperación máxima (ns)"
    )
    recovery_rho_max: float = Field(
        default=1.12, ge=1, description="Factor ρ de ambos umbrales en la separación mínima"
    )
    ramp_widening: float = Field(
        default=2.77,
        ge=0,
        description="Ensanchamiento relativo de la rampa p_always − p_never en la separación mínima",
    )

    @field_validator("scale_factors")
    @classmethod
    def _four_positive_factors(cls, value: list[float]) -> list[float]:
        if len(value) != 4 or any(v <= 0 for v in value):
            raise ValueError("scale_factors debe tener 4 valores positivos")
        return value

    @model_validator(mode="after")
    def _recovery_window(self) -> "DetectorConfig":
        if self.recovery_min_ns >= self.recovery_full_ns:
            raise ValueError("recovery_min_ns debe ser menor que recovery_full_ns")
        return self

    def resolved_profile_path(self) -> Path:
        """Resuelve la ruta de la tabla relativa a la raíz del proyecto."""
        path = self.threshold_profile_path
        return path if path.is_absolute() else PROJECT_ROOT / path


class CoincidenceWindowConfig(BaseModel):
    """Ventana de coincidencias y constantes de calibración temporal."""

    half_width_ticks: int = Field(default=16, gt=0, description="Semiancho de la ventana (ticks)")
    offsets_ticks: list[int] = Field(
        default=[0] * 16,
        description="Corrección por combinación (detector Alice * 4 + detector Bob)",
    )
    sync_search_range_ticks: int = Field(default=32_768, gt=0)
    sync_coarse_bin_ticks: int = Field(default=64, gt=0)
    sync_fine_bin_ticks: int = Field(default=1, gt=0)
    double_click_window_ticks: int = Field(default=16, ge=0)

    @field_validator("offsets_ticks")
    @classmethod
    def _bounded_offsets(cls, value: list[int]) -> list[int]:
        if len(value) != 16:
            raise ValueError("offsets_ticks debe tener 16 valores")
        if any(abs(v) > 4096 for v in value):
            raise ValueError("Los offsets de calibración deben estar en ±4096 ticks")
        return value

    def pair_offset(self, detector_a: int, detector_b: int) -> int:
        return self.offsets_ticks[detector_a * 4 + detector_b]


class BlindingConfig(BaseModel):
    """Láser c.w. de cegado."""

    power_w: float = Field(default=608e-12, ge=0, description="Potencia total de cegado (W)")
    polarization: tuple[float, float, float] = Field(
        default=(0.0, 0.0, 1.0), description="Vector de Stokes (s1, s2, s3)"
    )


class TriggerConfig(BaseModel):
    peak_factor: float = Field(default=2.0, gt=0, description="Pico del disparo en unidades de P_th")
    width_ns: float = Field(default=10.0, gt=0)


class PrepulseConfig(BaseModel):
    enabled: bool = True
    lead_ns: float = Field(default=100.0, ge=0)
    duration_ns: float = Field(default=150.0, gt=0)
    peak_power_w: float = Field(default=400e-6, ge=0)
    mode: PrepulseMode = PrepulseMode.ORTHOGONAL


class FsgConfig(BaseModel):
    """Generador de estados falsos de Eve."""

    blinding: BlindingConfig = Field(default_factory=BlindingConfig)
    trigger: TriggerConfig = Field(default_factory=TriggerConfig)
    prepulse: PrepulseConfig = Field(default_factory=PrepulseConfig)
    channel_delays_ns: list[float] = Field(
        default=[0.0, 0.0, 0.0, 0.0], description="Retardo ajustable por puerto (ns)"
    )
    insertion_delay_ns: float = Field(default=212.0, ge=0)
    min_spacing_ns: float = Field(
        default=550.0, ge=0, description="Separación mínima entre estados falsos (ns)"
    )

    @field_validator("channel_delays_ns")
    @classmethod
    def _four_delays(cls, value: list[float]) -> list[float]:
        if len(value) != 4:
            raise ValueError("channel_delays_ns debe tener 4 valores")
        return value


class EveConfig(BaseModel):
    position_fraction: float = Field(
        default=0.5, ge=0, le=1, description="Posición de Eve en la línea (fracción desde Alice)"
    )
    insertion_loss_db: float = Field(default=1.5, ge=0, description="Pérdida del analizador de Eve")
    fsg: FsgConfig = Field(default_factory=FsgConfig)
    calibration_pulses: int = Field(default=2000, ge=0, description="Pulsos por puerto al calibrar")


class EcConfig(BaseModel):
    """
    Calendario de bloques de Cascade.

    ``halving`` parte de ``initial_block`` y divide entre dos en cada pasada;
    ``doubling`` parte de max(min_block, ⌊block_factor / q⌋) y duplica.
    """

    passes: int = Field(default=4, ge=1, le=16)
    schedule: BlockSchedule = BlockSchedule.HALVING
    initial_block: int = Field(default=64, ge=2, description="Bloque de la primera pasada (halving)")
    block_factor: float = Field(default=0.73, gt=0, description="k1 = block_factor / q (doubling)")
    min_block: int = Field(default=8, ge=2, description="Bloque mínimo en ambos calendarios")


class PaConfig(BaseModel):
    safety_margin_bits: int = Field(default=100, ge=0)


class ProtocolConfig(BaseModel):
    block_epochs: int = Field(default=9, ge=1, description="Épocas por bloque de procesamiento")
    qber_sample_fraction: float = Field(default=0.05, gt=0, le=1)
    max_qber: float = Field(
        default=0.11, gt=0, le=0.5, description="QBER de muestra por encima del cual el bloque no produce clave"
    )
    double_click_policy: DoubleClickPolicy = DoubleClickPolicy.DISCARD
    ec: EcConfig = Field(default_factory=EcConfig)
    pa: PaConfig = Field(default_factory=PaConfig)


class CountermeasureConfig(BaseModel):
    test_photon_rate_hz: float = Field(
        default=0.0, ge=0, description="Fotones de prueba inyectados en Bob (0 = desactivado)"
    )
    alarm_fraction: float = Field(
        default=0.5, ge=0, le=1, description="Fracción de la eficiencia esperada bajo la que se alarma"
    )


class SessionConfig(BaseSettings):
    """Configuración completa de una sesión simulada."""

    model_config = SettingsConfigDict(
        env_file_encoding="utf-8",
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="forbid",
    )

    duration_s: float = Field(default=60.0, gt=0, description="Duración simulada (s)")
    scenario: Scenario = Scenario.NO_EVE
    rng_seed: int = Field(..., ge=0, lt=2**64, description="Semilla obligatoria")
    output_dir: Path = Field(default=Path("sessions/default"))
    alice_coupling_loss_db: float = Field(
        default=7.45, ge=0, description="Pérdida de acoplamiento del lado de Alice (dB)"
    )
    timestamp_jitter_fwhm_ps: float = Field(
        default=200.0, ge=0, description="Jitter de cada unidad de time-tagging (ps)"
    )

    source: SourceConfig = Field(default_factory=SourceConfig)
    channel: ChannelParams = Field(default_factory=ChannelParams)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    window: CoincidenceWindowConfig = Field(default_factory=CoincidenceWindowConfig)
    eve: EveConfig = Field(default_factory=EveConfig)
    protocol: ProtocolConfig = Field(default_factory=ProtocolConfig)
    countermeasure: CountermeasureConfig = Field(default_factory=CountermeasureConfig)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # Solo argumentos explícitos y el archivo; nunca el entorno del proceso
        return init_settings, dotenv_settings


def load_session_config(
    path: Optional[Path] = None,
    **overrides: Any,
) -> SessionConfig:
    """
    Carga una configuración de sesión desde un archivo clave=valor.

    Args:
        path: Archivo de configuración. Si es None solo se usan los overrides.
        **overrides: Valores que tienen prioridad sobre el archivo
            (por ejemplo ``rng_seed`` o ``duration_s``).

    Returns:
        SessionConfig validada.

    Raises:
        ConfigurationError: Si el archivo no existe o la configuración no es válida.
    """
    if path is not None and not Path(path).is_file():
        raise ConfigurationError(f"No existe el archivo de configuración: {path}")

    try:
        config = SessionConfig(_env_file=path, **overrides)
    except ValidationError as e:
        logger.error(f"Configuración de sesión inválida ({path}): {e}")
        raise ConfigurationError(f"Configuración de sesión inválida: {e}") from e

    logger.debug(f"Configuración cargada: escenario={config.scenario.value}, seed={config.rng_seed}")
    return config
