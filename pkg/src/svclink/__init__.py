"""svclink: link-level simulator for semantic keypoint video transmission.

Facial keypoints are compressed by a trainable quantized codec, carried
over simulated noisy or fading channels, and protected either by a
conventional RS-based IR-HARQ with CRC ACKs or by semantic HARQ driven by
a learned fluency detector, optionally with CSI-sorted OFDM subchannel
allocation.
"""

from .kpstream import (
    AKD_ACCEPT_THRESHOLD,
    KeypointFrame,
    KeypointStream,
    akd,
    load_stream,
    save_stream,
    synth_stream,
)
from .neuralcodec import (
    CodecModel,
    SymbolCodec,
    TrainConfig,
    decode,
    dequantize,
    encode,
    grad_check,
    load_model,
    quantize,
    save_model,
    train_stage1,
    train_stage2,
)
from .fec import RsCode, crc32, crc_check, rs_code, rs_decode, rs_encode
from .phy import (
    ChannelRealization,
    ConstellationMode,
    CsiPermutation,
    apply_perm,
    bsc,
    invert_perm,
    realize_channel,
    sort_csi,
    transmit_bits,
    transmit_symbols,
)
from .harq import (
    FluencyDetector,
    HarqSession,
    LinkChannel,
    TrialRecord,
    run_rs_irharq,
    run_svc,
    run_svc_csi_harq,
    run_svc_harq,
    train_fluency,
)

__version__ = "0.1.0"
