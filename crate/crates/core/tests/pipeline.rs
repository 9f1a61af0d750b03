use plabel_core::eval::{evaluate, label_accuracy};
use plabel_core::model::io::{read_detections, read_frame, read_labels};
use plabel_core::model::PipelineConfig;
use plabel_core::synth::{corrupt_labels, generate_sequence, write_sequence, SceneSpec};
use plabel_core::upg::generate_frame_labels;
use plabel_core::vsv::{nearest_frames, offline_refine};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(seed: u64) -> SceneSpec {
    SceneSpec {
        seed,
        num_frames: 3,
        num_objects: 12,
        ..SceneSpec::default()
    }
}

#[test]
fn written_sequence_reads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let seq = generate_sequence(&spec(21)).unwrap();
    write_sequence(&seq, dir.path()).unwrap();
    for ((frame, gt), dets) in seq.frames.iter().zip(&seq.ground_truth).zip(&seq.detections) {
        let id = &frame.frame_id;
        assert_eq!(&read_frame(&dir.path().join(format!("frames/{id}.alf"))).unwrap(), frame);
        assert_eq!(&read_labels(&dir.path().join(format!("gt/{id}.all"))).unwrap(), gt);
        assert_eq!(&read_detections(&dir.path().join(format!("detections/{id}.json"))).unwrap(), dets);
    }
}

#[test]
fn labels_do_not_depend_on_detection_order() {
    let mut s = spec(22);
    s.noise.mask_dilation = 2;
    s.noise.score_noise_sigma = 0.05;
    s.noise.detection_drop_prob = 0.2;
    let seq = generate_sequence(&s).unwrap();
    let cfg = PipelineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (frame, dets) in seq.frames.iter().zip(&seq.detections) {
        let base = generate_frame_labels(frame, dets, &cfg).unwrap().0;
        for _ in 0..3 {
            let mut shuffled = dets.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(generate_frame_labels(frame, &shuffled, &cfg).unwrap().0, base);
        }
    }
}

#[test]
fn noisy_detections_still_give_valid_labels() {
    let mut s = spec(23);
    s.noise.label_flip_prob = 0.3;
    s.noise.detection_drop_prob = 0.3;
    s.noise.mask_dilation = 3;
    s.noise.score_noise_sigma = 0.2;
    let seq = generate_sequence(&s).unwrap();
    let cfg = PipelineConfig::default();
    let mut preds = Vec::new();
    for (frame, dets) in seq.frames.iter().zip(&seq.detections) {
        let labels = generate_frame_labels(frame, dets, &cfg).unwrap().0;
        labels.check().unwrap();
        preds.push(labels);
    }
    let pairs: Vec<_> = preds.iter().zip(&seq.ground_truth).collect();
    let r = evaluate(&pairs, &cfg.class_names, &cfg.eval.iou_thresholds).unwrap();
    assert!((0.0..=1.0).contains(&r.ap.map) && (0.0..=1.0).contains(&r.miou));
    assert!(r.ap.map < 1.0);
}

#[test]
fn refinement_repairs_corruption_end_to_end() {
    let seq = generate_sequence(&SceneSpec {
        seed: 24,
        ..SceneSpec::default()
    })
    .unwrap();
    let cfg = PipelineConfig::default();
    let upg: Vec<_> = seq
        .frames
        .iter()
        .zip(&seq.detections)
        .map(|(f, d)| generate_frame_labels(f, d, &cfg).unwrap().0)
        .collect();
    let ts: Vec<f64> = seq.frames.iter().map(|f| f.timestamp).collect();
    let cur = 2;
    let corrupted = corrupt_labels(&upg[cur], 0.3, 1).unwrap();
    let adjacent: Vec<_> = nearest_frames(&ts, cur, cfg.ofr_frames)
        .into_iter()
        .map(|j| (&seq.frames[j], &upg[j]))
        .collect();
    let refined = offline_refine(&seq.frames[cur], &corrupted, &adjacent, &cfg).unwrap();
    refined.check().unwrap();
    let gt = &seq.ground_truth[cur].class_id;
    assert!(label_accuracy(&refined, gt).unwrap() > label_accuracy(&corrupted, gt).unwrap() + 0.1);
}
