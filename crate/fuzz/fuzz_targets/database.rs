#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(db) = scenesig::retrieval::SignatureDatabase::decode(data) {
        // a decoded database must survive a query against itself
        if !db.is_empty() {
            let _ = db.knn_query(&db.signature(0), 3);
        }
    }
});
