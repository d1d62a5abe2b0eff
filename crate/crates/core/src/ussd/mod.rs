//! USSD path: wire format, menu engine and gateway.

pub mod gateway;
pub mod menu;
pub mod pdu;
