use mebt::bench_eval::CountingAlloc;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() {
    std::process::exit(mebt::cli::cli_main(std::env::args_os()));
}
