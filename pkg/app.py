"""
Tactile Localization Workbench - Main Application
Synthetic corpus, training, evaluation and localization in one dashboard
"""

import streamlit as st

# Load .env if present (local development)
try:
    from dotenv import load_dotenv
    load_dotenv(override=True)
except ImportError:
    pass

from config.settings import CUSTOM_CSS, DEFAULT_OUT_DIR, PAGE_CONFIG, PRESETS, load_run_config
from utils.errors import ValidationError
from ui.tabs import render_corpus_tab, render_evaluation_tab, render_localization_tab, render_training_tab

# ── Page Configuration ─────────────────────────────────────────────────────────
st.set_page_config(**PAGE_CONFIG)
st.markdown(CUSTOM_CSS, unsafe_allow_html=True)

# ── Session State Initialisation ───────────────────────────────────────────────
defaults = {
    'run_config': None,
    'corpus': None,
    'eval_report': None,
    'eval_context': None,
}

for key, val in defaults.items():
    if key not in st.session_state:
        st.session_state[key] = val


# ── Main ───────────────────────────────────────────────────────────────────────
def main():
    st.markdown('<h1 class="stt-header">🖐️ Tactile Localization Workbench</h1>', unsafe_allow_html=True)

    # ── Sidebar ────────────────────────────────────────────────────────────────
    with st.sidebar:
        st.title("⚙️ Configuration")

        preset = st.selectbox("Preset", list(PRESETS), index=0)
        seed = st.number_input("Seed", min_value=0, value=7, step=1)
        out_dir = st.text_input("Output directory", value=DEFAULT_OUT_DIR)
        config_file = st.text_input("Config file (optional)", value="")

        st.divider()

        st.subheader("🎚️ Schedule")
        stage1 = st.number_input("Stage 1 epochs", min_value=0, value=PRESETS[preset]['stage1_epochs'])
        stage2 = st.number_input("Stage 2 epochs", min_value=0, value=PRESETS[preset]['stage2_epochs'])
        frozen = st.number_input("Frozen tactile backbone epochs", min_value=0,
                                 value=PRESETS[preset]['frozen_epochs'])

        st.divider()

        st.subheader("🎯 Evaluation")
        threshold = st.slider("Binarization threshold", 0.05, 1.0, 0.5, 0.05)
        frame_position = st.selectbox("Prototype frames", ["all", "start", "middle", "end"])

    overrides = {
        'preset': preset,
        'seed': str(int(seed)),
        'out': out_dir,
        'stage1_epochs': str(int(stage1)),
        'stage2_epochs': str(int(stage2)),
        'frozen_epochs': str(int(frozen)),
        'threshold': str(threshold),
        'frame_position': frame_position,
    }
    try:
        st.session_state['run_config'] = load_run_config(config_file or None, overrides)
    except ValidationError as exc:
        st.error(f"⚠️ Invalid configuration: {exc}")
        return

    # ── Tabs ───────────────────────────────────────────────────────────────────
    tab1, tab2, tab3, tab4 = st.tabs([
        "🧪 Synthetic Corpus",
        "🚀 Training",
        "📊 Evaluation",
        "🔎 Localization",
    ])

    with tab1:
        render_corpus_tab()
    with tab2:
        render_training_tab()
    with tab3:
        render_evaluation_tab()
    with tab4:
        render_localization_tab()

    st.divider()


if __name__ == "__main__":
    main()
