//! C ABI surface.

/// Library version probe.
#[no_mangle]
pub extern "C" fn parident_abi_version() -> u32 {
    1
}
