use std::path::Path;

use skysense_core::config::keys_markdown;

/// The key reference in docs/ is generated; rerun with SKYSENSE_UPDATE_DOCS=1 after changing keys.
#[test]
fn config_reference_is_current() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config.md");
    let fresh = keys_markdown();
    if std::env::var_os("SKYSENSE_UPDATE_DOCS").is_some() {
        std::fs::write(&path, &fresh).unwrap();
    }
    let on_disk = std::fs::read_to_string(&path).unwrap_or_default();
    assert_eq!(on_disk, fresh, "docs/config.md is stale");
}
