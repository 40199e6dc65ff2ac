use mimalloc::MiMalloc;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() {
    let code = intensivenet::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
