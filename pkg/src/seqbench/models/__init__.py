from .cells import (
    GRUCell,
    LSTMCell,
    RNNCell,
    TLSTMCell,
    gru_step,
    lstm_step,
    memory_decay,
    rnn_step,
    tlstm_step,
)
from .connections import (
    classify_head,
    embed_visits,
    fo_pool,
    qrnn_forward,
    reverse_padded,
    run_bidirectional,
    run_dilated,
    run_standard,
)
from .logistic import lr_forward, multi_hot
from .retain import retain_attention, retain_forward
from .zoo import (
    ARCHITECTURES,
    ModelSpec,
    SequenceModel,
    build_model,
    canonical_arch,
    ensemble_probs,
    load_checkpoint,
    save_checkpoint,
)
