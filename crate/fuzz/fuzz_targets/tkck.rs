#![no_main]

use libfuzzer_sys::fuzz_target;
use tkc::checkpoint::Checkpoint;
use tkc::trainer::CheckpointState;

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = Checkpoint::from_bytes(data) else {
        return;
    };
    assert_eq!(ck.to_bytes(), data);
    let _ = CheckpointState::decode(&ck);
});
