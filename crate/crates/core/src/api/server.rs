use std::io::Read;
use std::sync::Arc;

use super::{ApiRequest, ApiResponse, Method, Service, MAX_BODY};
use crate::error::{Error, Result};

fn respond(req: tiny_http::Request, resp: ApiResponse) {
    let header = tiny_http::Header::from_bytes("Content-Type", resp.content_type).expect("static header");
    let out = tiny_http::Response::from_data(resp.body)
        .with_status_code(resp.status)
        .with_header(header);
    if let Err(e) = req.respond(out) {
        log::debug!("client went away: {e}");
    }
}

fn read_request(req: &mut tiny_http::Request) -> Result<ApiRequest> {
    let method = Method::parse(req.method().as_str())
        .ok_or_else(|| Error::validation(format!("method {} is not supported", req.method())))?;
    let mut body = Vec::new();
    req.as_reader()
        .take(MAX_BODY as u64 + 1)
        .read_to_end(&mut body)
        .map_err(|e| Error::validation(format!("cannot read request body: {e}")))?;
    Ok(ApiRequest::from_url(method, req.url(), body))
}

/// Serves `service` on `bind` with `threads` request handlers until the
/// process exits. `on_ready` receives the bound address.
pub fn serve(service: Arc<Service>, bind: &str, threads: usize, on_ready: impl FnOnce(&str)) -> Result<()> {
    let server = tiny_http::Server::http(bind).map_err(|e| Error::validation(format!("cannot bind {bind}: {e}")))?;
    let server = Arc::new(server);
    let addr = server
        .server_addr()
        .to_ip()
        .map(|a| a.to_string())
        .unwrap_or_else(|| bind.to_string());
    log::info!("listening on http://{addr}");
    on_ready(&addr);
    let handles: Vec<_> = (0..threads.max(1))
        .map(|_| {
            let server = server.clone();
            let service = service.clone();
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let resp = match read_request(&mut req) {
                        Ok(api) => service.handle(&api),
                        Err(e) => ApiResponse::error(&e),
                    };
                    respond(req, resp);
                }
            })
        })
        .collect();
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}
