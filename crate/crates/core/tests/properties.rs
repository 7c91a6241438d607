use std::io::Cursor;
use std::path::PathBuf;

use emoaudionet::audio::{decode_wav, encode_wav, frame_geometry, frame_signal, AudioClip};
use emoaudionet::augment::{add_noise, pitch_shift};
use emoaudionet::corpus::{manifest_to_csv, parse_manifest, CorpusManifest, ManifestEntry, Split};
use emoaudionet::mfcc::{assemble_mfcc_input, MfccConfig};
use emoaudionet::nn::softmax;
use emoaudionet::spectro::spectro_image;
use emoaudionet::TaskKind;
use proptest::prelude::*;

fn clip_strategy(max_len: usize) -> impl Strategy<Value = AudioClip> {
    (prop::collection::vec(-1.0f64..=1.0, 1..max_len), prop::sample::select(vec![8_000u32, 16_000, 22_050, 44_100]))
        .prop_map(|(s, rate)| AudioClip::new("p", s, rate).unwrap())
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pcm_round_trip_within_one_step(clip in clip_strategy(2000)) {
        let mut buf = Cursor::new(Vec::new());
        encode_wav(&clip, &mut buf).unwrap();
        let back = decode_wav(Cursor::new(buf.into_inner()), "p").unwrap();
        prop_assert_eq!(back.sample_rate(), clip.sample_rate());
        prop_assert_eq!(back.len(), clip.len());
        for (a, b) in back.samples().iter().zip(clip.samples()) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn frame_count_matches_counting(len in 1usize..5000, win in 1usize..400, hop in 1usize..400) {
        let rate = 1000;
        let clip = AudioClip::new("f", vec![0.0; len], rate).unwrap();
        let (w, h) = frame_geometry(rate, win as f64 / rate as f64, hop as f64 / rate as f64).unwrap();
        let frames = frame_signal(&clip, win as f64 / rate as f64, hop as f64 / rate as f64).unwrap();
        // frames start at 0, h, 2h, ... until one reaches the end of the clip
        let mut expected = 1;
        while (expected - 1) * h + w < len {
            expected += 1;
        }
        prop_assert_eq!(frames.len(), expected);
    }

    #[test]
    fn noise_keeps_rate_length_and_rms_bound(clip in clip_strategy(3000), alpha in 0.0f64..0.2, seed in any::<u64>()) {
        let z = add_noise(&clip, alpha, seed).unwrap();
        prop_assert_eq!(z.sample_rate(), clip.sample_rate());
        prop_assert_eq!(z.len(), clip.len());
        prop_assert!(rms(z.samples()) <= rms(clip.samples()) + alpha + 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-800.0f64..800.0, 1..40)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn manifest_csv_round_trip(rows in prop::collection::vec(
        (0usize..4, -1.0f64..=1.0, prop::option::of(0u8..5), prop::option::of(0usize..3)), 1..12)
    ) {
        let entries = rows
            .iter()
            .enumerate()
            .map(|(i, &(task, value, speaker, split))| ManifestEntry {
                clip_id: format!("clip,{i}"),
                wav_path: PathBuf::from(format!("dir/c {i}.wav")),
                speaker_id: speaker.map(|s| format!("s\"{s}")),
                task: TaskKind::ALL[task],
                label_value: value,
                split: split.map(|s| [Split::Train, Split::Dev, Split::Test][s]),
            })
            .collect();
        let m = CorpusManifest::new(entries, "/base").unwrap();
        prop_assert_eq!(parse_manifest(&manifest_to_csv(&m), "/base").unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pitch_shift_keeps_rate_and_duration(clip in clip_strategy(4000), s in 0.0f64..6.0) {
        let y = pitch_shift(&clip, s).unwrap();
        prop_assert_eq!(y.sample_rate(), clip.sample_rate());
        let ratio = y.len() as f64 / clip.len() as f64;
        prop_assert!((ratio - 1.0).abs() <= 0.02, "{} -> {}", clip.len(), y.len());
    }

    #[test]
    fn mfcc_input_is_always_177(n in 1usize..80_000) {
        let samples = (0..n).map(|i| ((i * 7919) % 200) as f64 / 100.0 - 1.0).collect();
        let clip = AudioClip::new("m", samples, 16_000).unwrap();
        prop_assert_eq!(assemble_mfcc_input(&clip, &MfccConfig::default()).unwrap().values.len(), 177);
    }

    #[test]
    fn spectro_pixels_in_unit_range_and_repeatable(clip in clip_strategy(6000)) {
        let a = spectro_image(&clip).unwrap();
        prop_assert_eq!(a.shape(), [224, 224, 3]);
        prop_assert!(a.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert_eq!(a, spectro_image(&clip).unwrap());
    }
}
