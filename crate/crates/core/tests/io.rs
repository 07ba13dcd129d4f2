use ldlif_core::data::{gen_synthetic, Sample, SyntheticConfig};
use ldlif_core::events::{
    decode, encode, load_dataset, load_events, save_dataset, save_events, EventFileHeader,
    EventRecord, SpikeEventFile, VERSION,
};
use ldlif_core::neuron::{SpikeTrain, SpikeVector};
use ldlif_core::Error;
use proptest::prelude::*;

fn train_strategy() -> impl Strategy<Value = SpikeTrain> {
    (1usize..40, 0usize..30).prop_flat_map(|(width, steps)| {
        proptest::collection::vec(proptest::collection::vec(any::<bool>(), width), steps).prop_map(
            move |rows| SpikeTrain {
                width,
                frames: rows.into_iter().map(SpikeVector::from).collect(),
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_train_round_trips_through_a_file(train in train_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ldlf");
        save_events(&path, &train).unwrap();
        prop_assert_eq!(load_events(&path).unwrap(), train);
    }

    #[test]
    fn labeled_dataset_round_trips(trains in proptest::collection::vec(train_strategy(), 1..4), label in 0usize..10) {
        // Give every sample the first sample's shape.
        let (width, steps) = (trains[0].width, trains[0].steps());
        let samples: Vec<Sample> = trains
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let frames = (0..steps)
                    .map(|i| SpikeVector::from((0..width).map(|j| t.frames.get(i).is_some_and(|f| f.s.get(j) == Some(&true))).collect::<Vec<_>>()))
                    .collect();
                Sample { train: SpikeTrain { width, frames }, label: label + k }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ldlf");
        save_dataset(&path, &samples).unwrap();
        prop_assert_eq!(load_dataset(&path).unwrap(), samples);
    }

    #[test]
    fn corrupted_bytes_never_panic(flip in 0usize..200, byte in any::<u8>(), cut in 0usize..200) {
        let data = gen_synthetic(&SyntheticConfig { classes: 2, width: 8, steps: 6, samples_per_class: 2, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ldlf");
        save_dataset(&path, &data).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let k = flip % bytes.len();
        bytes[k] = byte;
        bytes.truncate(bytes.len() - cut.min(bytes.len()));
        let _ = decode(bytes.as_slice());
    }
}

fn one_sample_file(events: Vec<(u32, u32)>) -> SpikeEventFile {
    SpikeEventFile {
        header: EventFileHeader {
            version: VERSION,
            neuron_count: 4,
            timestep_count: 3,
            sample_count: 1,
        },
        samples: vec![EventRecord {
            label: Some(1),
            events,
        }],
    }
}

#[test]
fn out_of_range_and_unsorted_events_are_rejected() {
    let bad: [Vec<(u32, u32)>; 4] = [
        vec![(0, 4)],
        vec![(3, 0)],
        vec![(1, 2), (1, 1)],
        vec![(0, 0), (0, 0)],
    ];
    for events in bad {
        // The encoder refuses these, so encode a valid placeholder of the
        // same length and patch the event words in place.
        let placeholder = (0..events.len() as u32).map(|k| (0, k)).collect();
        let mut bytes = Vec::new();
        encode(&mut bytes, &one_sample_file(placeholder)).unwrap();
        let base = bytes.len() - 8 * events.len();
        for (k, &(t, id)) in events.iter().enumerate() {
            let at = base + 8 * k;
            bytes[at..at + 4].copy_from_slice(&t.to_le_bytes());
            bytes[at + 4..at + 8].copy_from_slice(&id.to_le_bytes());
        }
        match decode(bytes.as_slice()) {
            Err(Error::Validation { index, .. }) => assert!(index < events.len()),
            other => panic!("{events:?}: expected a validation error, got {other:?}"),
        }
    }
}

#[test]
fn bad_magic_and_trailing_bytes() {
    let mut bytes = Vec::new();
    encode(&mut bytes, &one_sample_file(vec![(0, 1), (2, 3)])).unwrap();
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(matches!(decode(wrong.as_slice()), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode(long.as_slice()), Err(Error::Format(_))));
    assert_eq!(
        decode(bytes.as_slice()).unwrap(),
        one_sample_file(vec![(0, 1), (2, 3)])
    );
}

#[test]
fn multi_sample_file_is_not_a_single_train() {
    let data = gen_synthetic(&SyntheticConfig {
        classes: 2,
        width: 4,
        steps: 3,
        samples_per_class: 1,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ldlf");
    save_dataset(&path, &data).unwrap();
    assert!(load_events(&path).is_err());
}
