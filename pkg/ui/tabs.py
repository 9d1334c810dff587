"""
Dashboard tabs: corpus generation, training, evaluation and localization
"""

import streamlit as st
import pandas as pd
import numpy as np
import plotly.express as px
import plotly.graph_objects as go

from utils import pipeline
from utils.corpus import parse_manifest, records_frame
from utils.encoders import Raster
from utils.errors import STTError
from utils.evaluation import BaselineModel, evaluate_interactive, evaluate_localization, robustness_frame, robustness_report
from utils.synthetic import TOUCH_MANIFEST, SyntheticCorpusSpec, generate_synthetic_corpus
from utils.training import LOSS_LOG, Trainer, loss_frame, read_loss_log


# ── Figures ────────────────────────────────────────────────────────────────────

def loss_figure(frame: pd.DataFrame):
    """Per-step loss, one trace per curriculum stage."""
    data = frame.assign(stage=frame['stage'].map(lambda s: f"Stage {s}"))
    fig = px.line(data, x='step', y='loss', color='stage', labels={'step': 'Step', 'loss': 'Loss'})
    fig.update_layout(hovermode='x unified', legend_title_text='')
    return fig


def epoch_loss_frame(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.groupby('epoch', as_index=False)['loss'].mean()


def category_metrics_figure(report_frame: pd.DataFrame):
    per_category = report_frame[report_frame['category'] != 'overall']
    fig = go.Figure(data=[
        go.Bar(name='mAP', x=per_category['category'], y=per_category['mAP'], marker_color='#7986CB'),
        go.Bar(name='mIoU', x=per_category['category'], y=per_category['mIoU'], marker_color='#81C784'),
    ])
    fig.update_layout(barmode='group', yaxis_title='%', yaxis=dict(range=[0, 100]))
    return fig


def robustness_figure(frame: pd.DataFrame):
    long = frame.melt(id_vars='frame', value_vars=['mAP', 'mIoU'], var_name='metric', value_name='value')
    fig = px.bar(long, x='frame', y='value', color='metric', barmode='group',
                 labels={'frame': 'Tactile frame', 'value': '%'})
    fig.update_layout(legend_title_text='')
    return fig


def saliency_figure(scores: np.ndarray):
    fig = go.Figure(data=[go.Heatmap(z=scores, colorscale='Inferno', zmin=0, zmax=1,
                                     colorbar=dict(title='Saliency'))])
    fig.update_layout(yaxis=dict(autorange='reversed', scaleanchor='x'), margin=dict(l=10, r=10, t=30, b=10))
    return fig


# ── Helpers ────────────────────────────────────────────────────────────────────

def _config():
    return st.session_state.get('run_config')


def _run(label, fn, *args, **kwargs):
    """Run a library call under a spinner; library errors become st.error."""
    with st.spinner(label):
        try:
            return fn(*args, **kwargs)
        except (STTError, OSError) as exc:
            st.error(f"⚠️ {exc}")
            return None


# ── Corpus Tab ─────────────────────────────────────────────────────────────────

def render_corpus_tab():
    st.header("Step 1: Synthetic Corpus")
    config = _config()

    col1, col2, col3 = st.columns(3)
    with col1:
        categories = st.number_input("Categories", min_value=2, max_value=config.encoder.backbone_dim, value=4)
        instances = st.number_input("Training instances per category", min_value=1, value=6)
    with col2:
        frames = st.number_input("Frames per instance", min_value=1, value=5)
        test_instances = st.number_input("Held-out instances per category", min_value=0, value=2)
    with col3:
        endpoint_noise = st.slider("Endpoint noise", 0.0, 1.0, 0.0, 0.05)
        endpoint_floor = st.slider("Endpoint floor", 0.0, 1.0, 0.4, 0.05)
        eval_scenes = st.number_input("Evaluation scenes", min_value=1, value=16)

    if st.button("🧪 Generate Corpus", type="primary"):
        spec = SyntheticCorpusSpec(
            categories=int(categories), instances_per_category=int(instances),
            test_instances_per_category=int(test_instances), frames_per_instance=int(frames),
            grid=config.encoder.grid, patch_size=config.encoder.patch_size,
            feature_dim=config.encoder.backbone_dim, endpoint_noise=float(endpoint_noise),
            endpoint_floor=float(endpoint_floor),
            eval_scenes=int(eval_scenes),
        )
        corpus = _run("Writing corpus…", generate_synthetic_corpus, spec, config.seed, config.corpus_dir)
        if corpus is not None:
            st.session_state.corpus = corpus
            st.success(f"✅ Corpus written to {corpus.root}")

    corpus = st.session_state.get('corpus')
    if corpus is not None:
        cols = st.columns(len(corpus.counts))
        for col, (name, value) in zip(cols, corpus.counts.items()):
            col.metric(name.replace('_', ' ').title(), value)
        st.caption("Categories: " + ", ".join(corpus.category_names))
        records = _run("Reading manifest…", parse_manifest, corpus.path(TOUCH_MANIFEST))
        if records:
            with st.expander(f"Touch records ({len(records)})"):
                st.dataframe(records_frame(records), use_container_width=True, hide_index=True)


# ── Training Tab ───────────────────────────────────────────────────────────────

def render_training_tab():
    st.header("Step 2: Train")
    config = _config()
    schedule = config.schedule
    col1, col2, col3 = st.columns(3)
    col1.metric("Epochs (stage 1 / 2)", f"{schedule.stage1_epochs} / {schedule.stage2_epochs}")
    col2.metric("Learning rate", f"{config.optimizer.lr:g}")
    col3.metric("Batch size", config.optimizer.batch_size)

    if st.button("🚀 Train", type="primary"):
        data = _run("Loading corpus…", pipeline.load_training_data, config)
        if data is not None:
            try:
                trainer = Trainer(pipeline.train_settings(config), data.corpora, data.store,
                                  config.out_path, config.echo())
            except STTError as exc:
                st.error(f"⚠️ {exc}")
                trainer = None
            if trainer is not None:
                result = _run("Training…", trainer.run)
                if result is not None:
                    st.success(f"✅ Trained {schedule.total_epochs} epochs; checkpoint {result.checkpoints[-1].name}")

    log_path = config.out_path / LOSS_LOG
    if log_path.exists():
        frame = loss_frame(read_loss_log(log_path))
        if frame.empty:
            st.info("Loss log is empty")
            return
        st.plotly_chart(loss_figure(frame), use_container_width=True)
        with st.expander("Mean loss per epoch"):
            st.dataframe(epoch_loss_frame(frame), use_container_width=True, hide_index=True)
    else:
        st.info("📤 Generate a corpus and train to see the loss curve")


# ── Evaluation Tab ─────────────────────────────────────────────────────────────

def render_evaluation_tab():
    st.header("Step 3: Evaluate")
    config = _config()
    model_choice = st.radio("Model", ["Trained encoder", "Full square", "Inscribed circle"], horizontal=True)

    if st.button("📊 Evaluate", type="primary"):
        if model_choice == "Trained encoder":
            context = _run("Loading checkpoint…", pipeline.evaluation_context, config)
            if context is None:
                return
            samples = _run("Loading scenes…", pipeline.load_eval_dataset, config, context)
            model = context.model
            st.session_state.eval_context = context
        else:
            samples = _run("Loading scenes…", pipeline.load_eval_dataset, config, None, False)
            model = BaselineModel('square' if model_choice == "Full square" else 'circle')
        if samples:
            report = _run("Scoring…", evaluate_localization, samples, model, config.evaluation, {'seed': config.seed})
            st.session_state.eval_report = report

    report = st.session_state.get('eval_report')
    if report is None:
        st.info("Run an evaluation to see mAP and mIoU")
        return

    col1, col2, col3 = st.columns(3)
    col1.metric("mAP", f"{report.mean_ap:.2f}")
    col2.metric("mIoU", f"{report.mean_iou:.2f}")
    col3.metric("Samples", report.samples)
    frame = report.to_frame()
    st.plotly_chart(category_metrics_figure(frame), use_container_width=True)
    st.dataframe(frame, use_container_width=True, hide_index=True)

    context = st.session_state.get('eval_context')
    if context is None:
        return
    col1, col2 = st.columns(2)
    with col1:
        if st.button("🤝 Interactive IIoU"):
            samples = _run("Loading scenes…", pipeline.load_interactive_dataset, config, context)
            if samples:
                iiou = _run("Scoring…", evaluate_interactive, samples, context.model, config.evaluation)
                if iiou is not None:
                    st.metric("IIoU", f"{iiou:.2f}")
    with col2:
        if st.button("🖐️ Frame Robustness"):
            samples = _run("Loading scenes…", pipeline.load_eval_dataset, config, context, False)
            if samples:
                reports = _run("Scoring…", robustness_report, context.test_instances, context.model, samples,
                               config.evaluation, context.describer)
                if reports:
                    st.plotly_chart(robustness_figure(robustness_frame(reports)), use_container_width=True)


# ── Localization Tab ───────────────────────────────────────────────────────────

def render_localization_tab():
    st.header("Step 4: Localize")
    config = _config()
    context = st.session_state.get('eval_context')
    if context is None:
        st.info("Evaluate the trained encoder first; its prototypes drive localization")
        return

    scenes = _run("Loading scenes…", pipeline.load_eval_dataset, config, None, False) or []
    scene_ids = sorted({sample.sample_id.rsplit('-', 1)[0] for sample in scenes})
    if not scene_ids:
        st.warning("No evaluation scenes found")
        return
    col1, col2 = st.columns(2)
    with col1:
        scene = st.selectbox("Scene", scene_ids)
    with col2:
        category = st.selectbox("Tactile prototype", list(context.prototypes.entries))

    if st.button("🔎 Localize", type="primary"):
        corpus = config.corpus_dir
        descriptor = context.prototypes[category].at(config.evaluation.frame_position)
        written = _run("Computing saliency…", pipeline.localize, config, context.params,
                       corpus / 'features' / f"{scene}.vtft", descriptor,
                       config.out_path / f"heatmap-{scene}-{category}", corpus / 'rasters' / f"{scene}.ppm")
        if written is not None:
            col1, col2 = st.columns(2)
            with col1:
                st.plotly_chart(saliency_figure(written['saliency'].scores), use_container_width=True)
            with col2:
                overlay = Raster.load(written['overlay'])
                st.image(overlay.rgb(), caption="Overlay", width=overlay.width)
