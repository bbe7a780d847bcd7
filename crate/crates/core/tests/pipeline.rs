//! Public-API checks that cross module boundaries.

use proptest::prelude::*;
use s2corr::correlation::{initial_correlation, FeatureBundle, FeatureGrid, TextEmbeddings};
use s2corr::infer::argmax_rows;
use s2corr::numerics::{decode, encode, Bundle, DynTensor, Rng, Tensor};
use s2corr::refine::{
    forward, Chunking, DomainTexts, PipelineConfig, PipelineDims, PipelineParams,
};
use s2corr::scan::build_chunk_plan;
use s2corr::Error;

fn bundle(seed: u64, h: usize, w: usize, classes: usize, d: usize) -> FeatureBundle<f64> {
    let mut rng = Rng::new(seed);
    FeatureBundle {
        visual: FeatureGrid::new(h, w, rng.normal_tensor(&[h * w, d], 1.0)).unwrap(),
        text: TextEmbeddings::new(
            rng.normal_tensor(&[classes, d], 1.0),
            (0..classes).map(|c| format!("class{c}")).collect(),
        )
        .unwrap(),
        domain_texts: Some(rng.normal_tensor(&[2, d], 1.0)),
    }
}

#[test]
fn bundle_on_disk_drives_the_forward_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let fb = bundle(2, 4, 6, 3, 5);
    fb.to_bundle().write(tmp.path()).unwrap();
    let back = FeatureBundle::<f64>::from_bundle(&Bundle::read(tmp.path()).unwrap()).unwrap();
    assert_eq!(back.visual, fb.visual);

    let params =
        PipelineParams::<f64>::init(PipelineDims::new(5, 8, 3).with_heads(2), &Rng::new(0))
            .unwrap();
    let cfg = PipelineConfig {
        chunking: Chunking::Len(3),
        ..PipelineConfig::default()
    };
    let dt = DomainTexts::new(back.domain_texts.clone().unwrap()).unwrap();
    let logits = forward(&back.visual, &back.text, &dt, &params, &cfg).unwrap();
    assert_eq!(logits.dims(), &[24, 3]);
    assert!(logits.data().iter().all(|v| v.is_finite()));

    // f32 tracks f64 closely on the same inputs.
    let lo = forward(
        &back.visual.cast::<f32>(),
        &back.text.cast::<f32>(),
        &dt.cast::<f32>(),
        &params.cast::<f32>(),
        &cfg,
    )
    .unwrap();
    let worst = lo
        .data()
        .iter()
        .zip(logits.data())
        .map(|(a, b)| (f64::from(*a) - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-4, "f32 drift {worst}");
}

#[test]
fn identity_pipeline_keeps_raw_predictions() {
    let fb = bundle(4, 4, 4, 4, 6);
    let params = PipelineParams::<f64>::identity(PipelineDims::new(6, 4, 4).with_heads(2)).unwrap();
    let dt = DomainTexts::neutral(6).unwrap();
    let logits = forward(
        &fb.visual,
        &fb.text,
        &dt,
        &params,
        &PipelineConfig::default(),
    )
    .unwrap();
    let raw = initial_correlation(&fb.visual, &fb.text).unwrap();
    assert_eq!(argmax_rows(logits.data(), 4), raw.argmax());

    // The default sixteen chunks do not fit a twelve-token grid.
    let small = bundle(4, 3, 4, 4, 6);
    let err = forward(
        &small.visual,
        &small.text,
        &dt,
        &params,
        &PipelineConfig::default(),
    );
    assert!(matches!(err, Err(Error::Argument(_))));
}

#[test]
fn sixteen_chunks_on_a_32_grid_clamp_to_the_row() {
    let cfg = PipelineConfig {
        chunking: Chunking::Total(16),
        ..PipelineConfig::default()
    };
    let plan = cfg.plan(32, 32).unwrap();
    assert_eq!(plan.chunk_len(), 32);
    assert_eq!(plan.clamped(), Some((64, 32)));
    assert_eq!(build_chunk_plan(4, 6, 4, 1.0, true).unwrap().chunk_len(), 3);
}

#[test]
fn truncated_file_is_a_format_error() {
    let bytes = encode(&Tensor::<f32>::zeros(&[2, 3]).unwrap());
    for cut in [0, 3, 8, bytes.len() - 1] {
        assert!(
            matches!(decode(&bytes[..cut]), Err(Error::Format(_))),
            "cut {cut}"
        );
    }
}

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..=4)
}

proptest! {
    #[test]
    fn encode_decode_is_bit_exact(dims in dims_strategy(), seed in any::<u64>(), wide in any::<bool>()) {
        let mut rng = Rng::new(seed);
        if wide {
            let t: Tensor<f64> = rng.normal_tensor(&dims, 1.0);
            prop_assert_eq!(decode(&encode(&t)).unwrap(), DynTensor::F64(t));
        } else {
            let t: Tensor<f32> = rng.normal_tensor(&dims, 1.0);
            prop_assert_eq!(decode(&encode(&t)).unwrap(), DynTensor::F32(t));
        }
    }

    #[test]
    fn chunk_length_always_divides_width(h in 1usize..6, w in 1usize..13, l in 1usize..40) {
        let plan = build_chunk_plan(h, w, l, 1.0, true).unwrap();
        prop_assert!(plan.chunk_len() <= l.max(1));
        prop_assert_eq!(w % plan.chunk_len(), 0);
    }
}
